// SPDX-License-Identifier: Apache-2.0
#include "amn/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include "binio.hpp"

namespace amn::audio {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::string fourcc(std::istream &is, const char *what) {
  std::array<char, 4> tag{};
  binio::get_bytes(is, tag.data(), 4, what);
  return std::string(tag.begin(), tag.end());
}

} // namespace

Clip load_wav(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot open " + path.string());
  if (fourcc(is, "RIFF tag") != "RIFF")
    throw std::runtime_error(path.string() + ": not a RIFF file");
  binio::get_u32(is, "RIFF size");
  if (fourcc(is, "WAVE tag") != "WAVE")
    throw std::runtime_error(path.string() + ": not a WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false, have_data = false;
  std::vector<char> data;
  while (true) {
    std::array<char, 4> tag{};
    is.read(tag.data(), 4);
    if (is.gcount() == 0)
      break;
    if (is.gcount() != 4)
      throw std::runtime_error(path.string() + ": truncated chunk header");
    const std::string id(tag.begin(), tag.end());
    const std::uint32_t size = binio::get_u32(is, "chunk size");
    if (id == "fmt ") {
      if (size < 16)
        throw std::runtime_error(path.string() + ": malformed fmt chunk");
      format = binio::get_u16(is, "fmt chunk");
      channels = binio::get_u16(is, "fmt chunk");
      rate = binio::get_u32(is, "fmt chunk");
      binio::get_u32(is, "fmt chunk");
      binio::get_u16(is, "fmt chunk");
      bits = binio::get_u16(is, "fmt chunk");
      std::vector<char> rest(size - 16);
      binio::get_bytes(is, rest.data(), rest.size(), "fmt chunk");
      if (format == kFormatExtensible) {
        if (rest.size() < 10)
          throw std::runtime_error(path.string() + ": malformed extensible fmt chunk");
        format = static_cast<std::uint16_t>(static_cast<unsigned char>(rest[8]) |
                                            (static_cast<unsigned char>(rest[9]) << 8));
      }
      have_fmt = true;
    } else if (id == "data") {
      data.resize(size);
      binio::get_bytes(is, data.data(), size, "data chunk");
      have_data = true;
      break;
    } else {
      is.ignore(size);
      if (static_cast<std::uint32_t>(is.gcount()) != size)
        throw std::runtime_error(path.string() + ": truncated chunk '" + id + "'");
    }
    if (size & 1u)
      is.ignore(1);
  }
  if (!have_fmt)
    throw std::runtime_error(path.string() + ": truncated file, no fmt chunk");
  if (channels < 1 || channels > 2)
    throw std::runtime_error(path.string() + ": unsupported channel count " +
                             std::to_string(channels));
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32)
    throw std::runtime_error(path.string() + ": unsupported encoding (format " +
                             std::to_string(format) + ", " + std::to_string(bits) +
                             " bits); expected PCM16 or float32");
  if (!have_data)
    throw std::runtime_error(path.string() + ": truncated file, no data chunk");

  const std::size_t width = bits / 8;
  const std::size_t frames = data.size() / (width * channels);
  if (frames == 0)
    throw std::runtime_error(path.string() + ": no samples");
  Clip clip;
  clip.id = path.stem().string();
  clip.sample_rate = rate;
  clip.samples.resize(frames);
  const auto *bytes = reinterpret_cast<const unsigned char *>(data.data());
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char *p = bytes + (i * channels + c) * width;
      if (pcm16) {
        const auto v = static_cast<std::int16_t>(p[0] | (p[1] << 8));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        const std::uint32_t u = static_cast<std::uint32_t>(p[0]) |
                                (static_cast<std::uint32_t>(p[1]) << 8) |
                                (static_cast<std::uint32_t>(p[2]) << 16) |
                                (static_cast<std::uint32_t>(p[3]) << 24);
        acc += std::clamp(static_cast<double>(std::bit_cast<float>(u)), -1.0, 1.0);
      }
    }
    clip.samples[i] = acc / static_cast<double>(channels);
  }
  return clip;
}

void write_wav_pcm16(const std::filesystem::path &path, const std::vector<double> &samples,
                     unsigned sample_rate) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  os.write("RIFF", 4);
  binio::put_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  binio::put_u32(os, 16);
  binio::put_u16(os, kFormatPcm);
  binio::put_u16(os, 1);
  binio::put_u32(os, sample_rate);
  binio::put_u32(os, sample_rate * 2);
  binio::put_u16(os, 2);
  binio::put_u16(os, 16);
  os.write("data", 4);
  binio::put_u32(os, data_bytes);
  for (double s : samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(c * 32767.0));
    binio::put_u16(os, static_cast<std::uint16_t>(q));
  }
  if (!os)
    throw std::runtime_error("write failed for " + path.string());
}

std::size_t hop_samples(double sample_rate) {
  return static_cast<std::size_t>(std::llround(kHopSeconds * sample_rate));
}

std::size_t window_samples(double sample_rate) {
  return static_cast<std::size_t>(std::llround(kWindowSeconds * sample_rate));
}

std::size_t frame_count(std::size_t num_samples, double sample_rate) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(num_samples) /
                                               static_cast<double>(hop_samples(sample_rate))));
}

namespace {

// FFTW planning is not thread-safe; execution with the new-array interface is.
struct R2cPlan {
  fftw_plan plan = nullptr;
  R2cPlan() {
    std::vector<double> in(kFftSize);
    std::vector<fftw_complex> out(kNumBins);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(kFftSize), in.data(), out.data(),
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  ~R2cPlan() { fftw_destroy_plan(plan); }
};

const R2cPlan &r2c_plan() {
  static std::mutex m;
  std::lock_guard lock(m);
  static R2cPlan plan;
  return plan;
}

std::size_t reflect_index(long j, std::size_t n) {
  if (n == 1)
    return 0;
  const long last = static_cast<long>(n) - 1;
  while (j < 0 || j > last) {
    if (j < 0)
      j = -j;
    if (j > last)
      j = 2 * last - j;
  }
  return static_cast<std::size_t>(j);
}

} // namespace

Tensor stft_power(const Clip &clip) {
  if (clip.sample_rate <= 0)
    throw std::invalid_argument("stft_power: sample rate not set");
  const std::size_t hop = hop_samples(clip.sample_rate);
  const std::size_t win = window_samples(clip.sample_rate);
  if (win > kFftSize)
    throw std::invalid_argument("stft_power: window longer than the FFT size");
  if (clip.samples.size() < hop)
    throw std::invalid_argument("stft_power: clip '" + clip.id + "' is shorter than one hop (" +
                                std::to_string(clip.samples.size()) + " < " +
                                std::to_string(hop) + " samples)");
  const std::size_t frames = frame_count(clip.samples.size(), clip.sample_rate);
  const long pad = static_cast<long>(win / 2);

  std::vector<double> window(win);
  for (std::size_t i = 0; i < win; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                     static_cast<double>(win));

  const R2cPlan &plan = r2c_plan();
  std::vector<double> buf(kFftSize, 0.0);
  std::vector<fftw_complex> spec(kNumBins);
  std::vector<double> power(frames * kNumBins);
  for (std::size_t t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t * hop) - pad;
    for (std::size_t i = 0; i < win; ++i)
      buf[i] = window[i] * clip.samples[reflect_index(start + static_cast<long>(i),
                                                      clip.samples.size())];
    fftw_execute_dft_r2c(plan.plan, buf.data(), spec.data());
    for (std::size_t k = 0; k < kNumBins; ++k)
      power[t * kNumBins + k] = spec[k][0] * spec[k][0] + spec[k][1] * spec[k][1];
  }
  return Tensor({frames, kNumBins}, std::move(power));
}

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> build_filterbank(double sample_rate) {
  const double mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(kNumMels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(kNumMels + 1));
  std::vector<double> fb(kNumMels * kNumBins, 0.0);
  for (std::size_t m = 0; m < kNumMels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    const double norm = 2.0 / (hi - lo);
    for (std::size_t k = 0; k < kNumBins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(kFftSize);
      const double rise = (f - lo) / (mid - lo);
      const double fall = (hi - f) / (hi - mid);
      fb[m * kNumBins + k] = std::max(0.0, std::min(rise, fall)) * norm;
    }
  }
  return fb;
}

} // namespace

const std::vector<double> &mel_filterbank(double sample_rate) {
  static std::mutex m;
  static std::map<double, std::vector<double>> cache;
  std::lock_guard lock(m);
  auto it = cache.find(sample_rate);
  if (it == cache.end())
    it = cache.emplace(sample_rate, build_filterbank(sample_rate)).first;
  return it->second;
}

Tensor mel_apply(const Tensor &power, double sample_rate) {
  if (power.rank() != 2 || power.dim(1) != kNumBins)
    throw std::invalid_argument("mel_apply: expected [t x 1025] power, got " +
                                shape_str(power.shape()));
  const auto &fb = mel_filterbank(sample_rate);
  const std::size_t frames = power.dim(0);
  auto pv = power.values();
  std::vector<double> out(frames * kNumMels, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t m = 0; m < kNumMels; ++m) {
      double s = 0.0;
      const double *row = &fb[m * kNumBins];
      const double *p = &pv[t * kNumBins];
      for (std::size_t k = 0; k < kNumBins; ++k)
        s += row[k] * p[k];
      out[t * kNumMels + m] = s;
    }
  return Tensor({frames, kNumMels}, std::move(out));
}

MelSpectrogram log_compress(const Tensor &mel) {
  auto mv = mel.values();
  std::vector<double> out(mv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(std::log(std::max(mv[i], kLogFloor)));
  return MelSpectrogram{Tensor(mel.shape(), std::move(out))};
}

MelSpectrogram featurize(const Clip &clip, double expected_rate) {
  if (clip.sample_rate != expected_rate)
    throw std::invalid_argument("featurize: clip '" + clip.id + "' has sample rate " +
                                std::to_string(clip.sample_rate) + " Hz, expected " +
                                std::to_string(expected_rate) + " Hz (no resampling)");
  return log_compress(mel_apply(stft_power(clip), clip.sample_rate));
}

void write_feature_cache(const std::filesystem::path &path, const MelSpectrogram &mel) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os.write("LMS1", 4);
  binio::put_u32(os, static_cast<std::uint32_t>(mel.frames.dim(0)));
  binio::put_u32(os, static_cast<std::uint32_t>(mel.frames.dim(1)));
  for (double v : mel.frames.values())
    binio::put_f32(os, static_cast<float>(v));
}

MelSpectrogram read_feature_cache(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  binio::get_bytes(is, magic, 4, "feature cache magic");
  if (std::string(magic, 4) != "LMS1")
    throw std::runtime_error(path.string() + ": bad feature cache magic");
  const std::uint32_t t = binio::get_u32(is, "feature cache header");
  const std::uint32_t f = binio::get_u32(is, "feature cache header");
  if (t == 0 || f != kNumMels)
    throw std::runtime_error(path.string() + ": unexpected feature cache extents");
  std::vector<double> values(static_cast<std::size_t>(t) * f);
  for (double &v : values)
    v = binio::get_f32(is, "feature cache data");
  return MelSpectrogram{Tensor({t, f}, std::move(values))};
}

} // namespace amn::audio
