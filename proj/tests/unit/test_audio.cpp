// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <numbers>
#include <vector>

#include "doctest.h"

#include "amn/audio.hpp"
#include "amn/rng.hpp"
#include "util.hpp"

using namespace amn;
using namespace amn::audio;
using amn::testing::TempDir;

namespace {

void put_u32(std::string &s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u16(std::string &s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>(v >> 8));
}

/// Minimal RIFF writer for formats the library does not emit itself.
std::string wav_bytes(std::uint16_t format, std::uint16_t channels, std::uint16_t bits,
                      std::uint32_t rate, const std::string &data) {
  std::string s = "RIFF";
  put_u32(s, static_cast<std::uint32_t>(36 + data.size()));
  s += "WAVEfmt ";
  put_u32(s, 16);
  put_u16(s, format);
  put_u16(s, channels);
  put_u32(s, rate);
  put_u32(s, rate * channels * bits / 8);
  put_u16(s, static_cast<std::uint16_t>(channels * bits / 8));
  put_u16(s, bits);
  s += "data";
  put_u32(s, static_cast<std::uint32_t>(data.size()));
  return s + data;
}

Clip sine(double freq, double seconds, double amp = 0.5) {
  Clip c;
  c.samples.resize(static_cast<std::size_t>(seconds * c.sample_rate));
  for (std::size_t i = 0; i < c.samples.size(); ++i)
    c.samples[i] = amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) /
                                  c.sample_rate);
  return c;
}

} // namespace

TEST_SUITE("audio") {

TEST_CASE("wav reading") {
  TempDir dir("audio");
  write_wav_pcm16(dir / "silence.wav", std::vector<double>(44100, 0.0), 44100);
  const Clip s = load_wav(dir / "silence.wav");
  CHECK(s.samples.size() == 44100);
  CHECK(s.sample_rate == 44100.0);
  for (double v : s.samples)
    CHECK(v == 0.0);

  std::string stereo;
  for (int i = 0; i < 100; ++i) {
    put_u16(stereo, static_cast<std::uint16_t>(16384));
    put_u16(stereo, static_cast<std::uint16_t>(-16384));
  }
  amn::testing::spit(dir / "stereo.wav", wav_bytes(1, 2, 16, 44100, stereo));
  const Clip m = load_wav(dir / "stereo.wav");
  CHECK(m.samples.size() == 100);
  for (double v : m.samples)
    CHECK(v == 0.0);

  const Clip tone = sine(441.0, 0.1, 1.0);
  write_wav_pcm16(dir / "tone.wav", tone.samples, 44100);
  const Clip back = load_wav(dir / "tone.wav");
  double peak = 0.0;
  for (double v : back.samples)
    peak = std::max(peak, std::abs(v));
  CHECK(std::abs(peak - 1.0) <= 1.0 / 32768.0);

  std::string f32;
  for (float v : {0.25f, -0.5f}) {
    char b[4];
    std::memcpy(b, &v, 4);
    f32.append(b, 4);
  }
  amn::testing::spit(dir / "float.wav", wav_bytes(3, 1, 32, 22050, f32));
  const Clip fl = load_wav(dir / "float.wav");
  CHECK(fl.sample_rate == 22050.0);
  CHECK(fl.samples == std::vector<double>{0.25, -0.5});

  amn::testing::spit(dir / "pcm8.wav", wav_bytes(1, 1, 8, 44100, std::string(10, '\x80')));
  CHECK_THROWS(load_wav(dir / "pcm8.wav"));
  const std::string full = amn::testing::slurp(dir / "tone.wav");
  amn::testing::spit(dir / "cut.wav", full.substr(0, full.size() / 2));
  CHECK_THROWS(load_wav(dir / "cut.wav"));
  amn::testing::spit(dir / "header.wav", full.substr(0, 20));
  CHECK_THROWS(load_wav(dir / "header.wav"));
}

TEST_CASE("stft framing, silence and bin concentration") {
  CHECK(stft_power(sine(1000.0, 10.0)).shape() == Shape{500, kNumBins});
  Clip zero;
  zero.samples.assign(44100, 0.0);
  const Tensor zp = stft_power(zero);
  for (double v : zp.values())
    CHECK(v == 0.0);
  Clip tiny;
  tiny.samples.assign(100, 0.0);
  CHECK_THROWS(stft_power(tiny));

  const std::size_t bin = 93;
  const double freq = static_cast<double>(bin) * 44100.0 / static_cast<double>(kFftSize);
  const Tensor p = stft_power(sine(freq, 1.0));
  const auto pv = p.values();
  const std::size_t frame = p.dim(0) / 2;
  double total = 0.0, near = 0.0;
  for (std::size_t k = 0; k < kNumBins; ++k) {
    const double e = pv[frame * kNumBins + k];
    total += e;
    if (k + 2 >= bin && k <= bin + 2)
      near += e;
  }
  CHECK(near / total >= 0.95);
}

TEST_CASE("mel filterbank geometry") {
  const Tensor zero = mel_apply(Tensor::zeros({3, kNumBins}), 44100.0);
  CHECK(zero.shape() == Shape{3, kNumMels});
  for (double v : zero.values())
    CHECK(v == 0.0);

  const Tensor flat = mel_apply(Tensor::full({1, kNumBins}, 1.0), 44100.0);
  for (double v : flat.values())
    CHECK(v > 0.0);

  for (std::size_t bin : {3u, 40u, 200u, 700u}) {
    std::vector<double> imp(kNumBins, 0.0);
    imp[bin] = 1.0;
    const Tensor m = mel_apply(Tensor({1, kNumBins}, imp), 44100.0);
    std::size_t nonzero = 0;
    for (double v : m.values())
      nonzero += v != 0.0;
    CHECK(nonzero <= 2);
  }
}

TEST_CASE("log compression") {
  const auto m = log_compress(Tensor({1, 2}, {1.0, 0.0}));
  CHECK(m.frames.values()[0] == 0.0);
  CHECK(m.frames.values()[1] == doctest::Approx(std::log(1e-10)).epsilon(1e-6));
  CHECK(m.frames.values()[1] == doctest::Approx(-23.026).epsilon(1e-4));

  Rng rng(2);
  std::vector<double> xs(200);
  for (double &x : xs)
    x = std::exp(rng.uniform(-30.0, 5.0));
  std::sort(xs.begin(), xs.end());
  const auto l = log_compress(Tensor({1, xs.size()}, xs));
  const auto lv = l.frames.values();
  for (std::size_t i = 1; i < lv.size(); ++i)
    CHECK(lv[i] >= lv[i - 1]);
}

TEST_CASE("featurize shapes, determinism, rate check and cache") {
  const Clip ten = sine(700.0, 10.0);
  const auto a = featurize(ten);
  const auto b = featurize(ten);
  CHECK(a.frames.shape() == Shape{500, kNumMels});
  CHECK(std::equal(a.frames.values().begin(), a.frames.values().end(),
                   b.frames.values().begin()));
  CHECK(featurize(sine(700.0, 5.0)).frames.shape() == Shape{250, kNumMels});
  for (std::size_t n : {882u, 1000u, 44100u + 441u, 123457u})
    CHECK(frame_count(n, 44100.0) ==
          static_cast<std::size_t>(std::llround(static_cast<double>(n) / 882.0)));

  Clip other = sine(700.0, 1.0);
  other.sample_rate = 16000.0;
  CHECK_THROWS(featurize(other));

  TempDir dir("cache");
  write_feature_cache(dir / "a.lms", a);
  const auto c = read_feature_cache(dir / "a.lms");
  CHECK(c.frames.shape() == a.frames.shape());
  CHECK(std::equal(a.frames.values().begin(), a.frames.values().end(),
                   c.frames.values().begin()));
  amn::testing::spit(dir / "bad.lms", "LMS2xxxxxxxx");
  CHECK_THROWS(read_feature_cache(dir / "bad.lms"));
}

} // TEST_SUITE
