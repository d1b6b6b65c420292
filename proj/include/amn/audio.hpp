// SPDX-License-Identifier: Apache-2.0
/**
 * @file   audio.hpp
 * @brief  WAV I/O and the 64-band log-mel front end (40 ms Hann window,
 *         20 ms hop, 2048-point FFT, centered reflect-padded frames).
 */
#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "amn/tensor.hpp"

namespace amn::audio {

inline constexpr double kDefaultSampleRate = 44100.0;
inline constexpr std::size_t kFftSize = 2048;
inline constexpr std::size_t kNumBins = kFftSize / 2 + 1;
inline constexpr std::size_t kNumMels = 64;
inline constexpr double kHopSeconds = 0.020;
inline constexpr double kWindowSeconds = 0.040;
inline constexpr double kLogFloor = 1e-10;

struct Clip {
  std::string id;
  std::vector<double> samples; ///< mono, in [-1, 1]
  double sample_rate = kDefaultSampleRate;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct MelSpectrogram {
  Tensor frames; ///< [t x 64] natural-log mel power
  double hop_seconds = kHopSeconds;
  double window_seconds = kWindowSeconds;

  std::size_t num_frames() const { return frames.dim(0); }
};

/// Reads RIFF/WAVE PCM16 or float32, mono or stereo; stereo is averaged.
Clip load_wav(const std::filesystem::path &path);

/// Writes mono 16-bit PCM, clipping to [-1, 1].
void write_wav_pcm16(const std::filesystem::path &path, const std::vector<double> &samples,
                     unsigned sample_rate);

std::size_t hop_samples(double sample_rate);
std::size_t window_samples(double sample_rate);

/// Number of centered frames for `num_samples`: round(num_samples / hop).
std::size_t frame_count(std::size_t num_samples, double sample_rate);

/// |FFT|^2 of Hann-windowed, zero-padded frames: [t x 1025].
Tensor stft_power(const Clip &clip);

/// [64 x 1025] triangular filters on the 2595*log10(1 + f/700) scale
/// between 0 Hz and sr/2, each scaled by 2 / (upper edge - lower edge).
const std::vector<double> &mel_filterbank(double sample_rate);

Tensor mel_apply(const Tensor &power, double sample_rate);

/// log(max(x, 1e-10)), rounded to single precision.
MelSpectrogram log_compress(const Tensor &mel);

/// Full front end. Rejects clips whose rate differs from `expected_rate`.
MelSpectrogram featurize(const Clip &clip, double expected_rate = kDefaultSampleRate);

/// Feature cache: "LMS1", u32 t, u32 f, then f32 little-endian row-major.
void write_feature_cache(const std::filesystem::path &path, const MelSpectrogram &mel);
MelSpectrogram read_feature_cache(const std::filesystem::path &path);

} // namespace amn::audio
