// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary streams shared by the feature, centroid and
// checkpoint formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rice {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Buffers the whole payload and writes it on close(), so a failed write
/// never leaves a half-written file behind under the final name.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::filesystem::path path) : path_(std::move(path)) {}

  void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void close() {
    const auto tmp = std::filesystem::path(path_.string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + path_.string());
      out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
      if (!out) throw std::runtime_error("write failed: " + path_.string());
    }
    std::filesystem::rename(tmp, path_);
  }

 private:
  std::filesystem::path path_;
  std::vector<char> buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : name_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + name_);
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::string_view(buf_.data() + pos_, m.size()) != m)
      throw FormatError(name_ + ": bad magic, expected " + std::string(m));
    pos_ += m.size();
  }
  /// Consumes the magic if present.
  bool try_magic(std::string_view m) {
    if (remaining() < m.size() || std::string_view(buf_.data() + pos_, m.size()) != m) return false;
    pos_ += m.size();
    return true;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void f32s(std::span<float> out) {
    need(out.size() * 4);
    for (auto& x : out) x = f32();
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }
  void expect_end() const {
    if (remaining() != 0) throw FormatError(name_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError(name_ + ": truncated file");
  }

  std::string name_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace rice
