// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

extern "C" void openblas_set_num_threads(int);

namespace rocnet {

class DimensionError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tracks live/peak bytes held by tensor buffers (values + gradients).
// Parameter stores can snapshot a baseline so training runs report only
// the activation footprint.
class MemoryTracker {
 public:
  static void add(std::size_t bytes) {
    std::size_t cur = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = peak_.load(std::memory_order_relaxed);
    while (cur > prev &&
           !peak_.compare_exchange_weak(prev, cur, std::memory_order_relaxed)) {
    }
  }
  static void sub(std::size_t bytes) {
    live_.fetch_sub(bytes, std::memory_order_relaxed);
  }
  static std::size_t live() { return live_.load(std::memory_order_relaxed); }
  static std::size_t peak() { return peak_.load(std::memory_order_relaxed); }
  static void reset_peak() { peak_.store(live(), std::memory_order_relaxed); }

 private:
  static inline std::atomic<std::size_t> live_{0};
  static inline std::atomic<std::size_t> peak_{0};
};

// ROCNET_THREADS caps internal parallelism. 0 (or unset) selects the
// sequential, bit-reproducible mode.
inline int thread_limit() {
  const char* env = std::getenv("ROCNET_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  int v = std::atoi(env);
  return v <= 0 ? 1 : v;
}

inline void apply_thread_limit() { openblas_set_num_threads(thread_limit()); }

inline bool is_power_of_two(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline int log2_exact(std::uint64_t v) {
  int l = 0;
  while (v > 1) {
    v >>= 1;
    ++l;
  }
  return l;
}

// ---- little-endian binary primitives (file formats are bit-exact specs) ----

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline std::uint8_t read_u8(std::istream& is) {
  int c = is.get();
  if (c == EOF) throw IoError("unexpected end of stream");
  return static_cast<std::uint8_t>(c);
}

inline std::uint16_t read_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw IoError("unexpected end of stream");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_bytes(std::ostream& os, const std::uint8_t* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, std::uint8_t* data, std::size_t n) {
  if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n)))
    throw IoError("truncated payload");
}

inline void expect_magic(std::istream& is, const char* magic) {
  std::size_t n = std::strlen(magic);
  std::vector<char> buf(n);
  if (!is.read(buf.data(), static_cast<std::streamsize>(n)) ||
      std::memcmp(buf.data(), magic, n) != 0)
    throw IoError(std::string("bad magic, expected ") + magic);
}

inline std::ofstream open_output(const std::string& path, std::ios::openmode mode = std::ios::binary) {
  std::ofstream os(path, mode);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_input(const std::string& path, std::ios::openmode mode = std::ios::binary) {
  std::ifstream is(path, mode);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

}  // namespace rocnet
