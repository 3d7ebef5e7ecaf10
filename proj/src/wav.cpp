// SPDX-License-Identifier: Apache-2.0
#include <lasd/audio.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace lasd {

WavError::WavError(WavErrc code, std::size_t offset, const std::string &what)
  : Error(what), code_(code), offset_(offset) {}

namespace {

constexpr std::uint16_t kFormatPcm = 1;

std::uint16_t le16(const std::uint8_t *p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}
std::uint32_t le32(const std::uint8_t *p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
bool fourcc(const std::uint8_t *p, const char *tag) {
  return std::memcmp(p, tag, 4) == 0;
}

void put16(std::vector<std::uint8_t> &out, std::uint16_t v) {
  out.push_back(std::uint8_t(v & 0xff));
  out.push_back(std::uint8_t(v >> 8));
}
void put32(std::vector<std::uint8_t> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(std::uint8_t((v >> (8 * i)) & 0xff));
}

} // namespace

AudioClip parse_wav(std::span<const std::uint8_t> bytes) {
  const std::size_t n = bytes.size();
  if (n < 12 || !fourcc(bytes.data(), "RIFF") ||
      !fourcc(bytes.data() + 8, "WAVE"))
    throw WavError(WavErrc::malformed_header, 0,
                   "wav: missing RIFF/WAVE signature");

  bool have_fmt = false;
  AudioClip clip;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const std::uint8_t *hdr = bytes.data() + pos;
    const std::size_t size = le32(hdr + 4);
    const std::size_t body = pos + 8;
    if (fourcc(hdr, "fmt ")) {
      if (size < 16 || body + size > n)
        throw WavError(WavErrc::malformed_header, pos,
                       "wav: fmt chunk at offset " + std::to_string(pos) +
                         " is too short");
      const std::uint8_t *f = bytes.data() + body;
      const auto format = le16(f);
      const auto channels = le16(f + 2);
      const auto bits = le16(f + 14);
      if (format != kFormatPcm)
        throw WavError(WavErrc::unsupported_format, body,
                       "wav: unsupported format code " +
                         std::to_string(format) + " (only PCM 1)");
      if (bits != 16)
        throw WavError(WavErrc::unsupported_bit_depth, body + 14,
                       "wav: unsupported bit depth " + std::to_string(bits) +
                         " (only 16)");
      if (channels != 1)
        throw WavError(WavErrc::unsupported_channels, body + 2,
                       "wav: unsupported channel count " +
                         std::to_string(channels) + " (only mono)");
      clip.sample_rate = le32(f + 4);
      have_fmt = true;
    } else if (fourcc(hdr, "data")) {
      if (!have_fmt)
        throw WavError(WavErrc::malformed_header, pos,
                       "wav: data chunk precedes fmt chunk");
      if (body + size > n)
        throw WavError(WavErrc::truncated_data, n,
                       "wav: data chunk at offset " + std::to_string(pos) +
                         " declares " + std::to_string(size) +
                         " bytes but input ends at byte offset " +
                         std::to_string(n));
      if (size % 2 != 0)
        throw WavError(WavErrc::truncated_data, body + size,
                       "wav: data chunk ends mid-sample at byte offset " +
                         std::to_string(body + size));
      clip.samples.resize(size / 2);
      const std::uint8_t *d = bytes.data() + body;
      for (std::size_t i = 0; i < clip.samples.size(); ++i)
        clip.samples[i] =
          float(std::int16_t(le16(d + 2 * i))) / 32768.0f;
      return clip;
    }
    pos = body + size + (size & 1);
  }
  throw WavError(WavErrc::malformed_header, std::min(pos, n),
                 "wav: no data chunk found");
}

AudioClip read_wav(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open audio file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

std::vector<std::uint8_t> encode_wav(const AudioClip &clip) {
  const std::uint32_t data_bytes = std::uint32_t(clip.samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put32(out, 16);
  put16(out, kFormatPcm);
  put16(out, 1);
  put32(out, clip.sample_rate);
  put32(out, clip.sample_rate * 2);
  put16(out, 2);
  put16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put32(out, data_bytes);
  for (float s : clip.samples) {
    const long v = std::lround(std::clamp(s, -1.0f, 1.0f) * 32768.0f);
    put16(out, std::uint16_t(std::int16_t(std::clamp(v, -32768L, 32767L))));
  }
  return out;
}

void write_wav(const std::filesystem::path &path, const AudioClip &clip) {
  const auto bytes = encode_wav(clip);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write audio file " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()),
            std::streamsize(bytes.size()));
}

} // namespace lasd
