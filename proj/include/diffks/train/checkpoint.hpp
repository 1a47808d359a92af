#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/tensor.hpp"

namespace diffks {

/// Everything in a checkpoint besides the parameter arrays.
struct CheckpointMeta {
  std::uint32_t scalar_bytes = 0;   ///< 4 (f32) or 8 (f64)
  std::string config;               ///< key-value echo of the training config
  std::vector<std::string> vocab;   ///< regular tokens in id order
  std::uint64_t epoch = 0;          ///< epochs completed
  double best_metric = 0.0;
  std::uint64_t best_epoch = 0;
};

namespace ckpt {

inline constexpr char kMagic[8] = {'D', 'I', 'F', 'F', 'K', 'S', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <class U>
  void pod(const U& x) {
    out_.write(reinterpret_cast<const char*>(&x), sizeof(U));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <class U>
  void array(const std::vector<U>& v) {
    pod<std::uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(U)));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <class U>
  U pod() {
    U x{};
    in_.read(reinterpret_cast<char*>(&x), sizeof(U));
    check();
    return x;
  }
  std::string str() {
    const auto n = length();
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  template <class U>
  void array_into(std::vector<U>& v, const std::string& what) {
    const auto n = length();
    if (n != v.size())
      throw DataError(path_ + ": " + what + " has " + std::to_string(n) + " values, model expects " +
                      std::to_string(v.size()));
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(U)));
    check();
  }

 private:
  std::uint64_t length() {
    const auto n = pod<std::uint64_t>();
    if (n > (std::uint64_t{1} << 36)) throw DataError(path_ + ": corrupt checkpoint (implausible length)");
    return n;
  }
  void check() {
    if (!in_) throw DataError(path_ + ": truncated checkpoint");
  }
  std::ifstream& in_;
  std::string path_;
};

inline CheckpointMeta read_header(Reader& r, const std::string& path) {
  char magic[8];
  for (auto& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError(path + ": not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointMeta meta;
  meta.scalar_bytes = r.pod<std::uint32_t>();
  meta.config = r.str();
  const auto n_vocab = r.pod<std::uint64_t>();
  meta.vocab.reserve(n_vocab);
  for (std::uint64_t i = 0; i < n_vocab; ++i) meta.vocab.push_back(r.str());
  meta.epoch = r.pod<std::uint64_t>();
  meta.best_metric = r.pod<double>();
  meta.best_epoch = r.pod<std::uint64_t>();
  return meta;
}

}  // namespace ckpt

/// Binary layout: magic, version, scalar size, config text, vocabulary, epoch
/// counters, group step counts, then per parameter its name, shape, value, m and v.
/// Written to a temporary file and renamed into place.
template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, CheckpointMeta meta) {
  meta.scalar_bytes = sizeof(T);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + tmp);
    ckpt::Writer w(out);
    for (char c : ckpt::kMagic) w.pod(c);
    w.pod(ckpt::kVersion);
    w.pod(meta.scalar_bytes);
    w.str(meta.config);
    w.pod<std::uint64_t>(meta.vocab.size());
    for (const auto& t : meta.vocab) w.str(t);
    w.pod(meta.epoch);
    w.pod(meta.best_metric);
    w.pod(meta.best_epoch);
    w.pod<std::uint64_t>(store.groups().size());
    for (const auto& g : store.groups()) {
      w.str(g.name);
      w.pod(g.step);
    }
    w.pod<std::uint64_t>(store.params().size());
    for (const auto& p : store.params()) {
      w.str(p.name);
      w.pod<std::uint64_t>(p.rows);
      w.pod<std::uint64_t>(p.cols);
      w.array(p.value);
      w.array(p.m);
      w.array(p.v);
    }
    out.flush();
    if (!out) throw DataError("failed writing checkpoint: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Reads only the header, e.g. to build a model of the right shape before loading.
inline CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  ckpt::Reader r(in, path);
  return ckpt::read_header(r, path);
}

/// Loads values, Adam moments and step counts into an existing store whose layout
/// (names, shapes, precision) must match the file exactly.
template <class T>
CheckpointMeta load_checkpoint(const std::string& path, ParamStore<T>& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  ckpt::Reader r(in, path);
  auto meta = ckpt::read_header(r, path);
  if (meta.scalar_bytes != sizeof(T))
    throw DataError(path + ": checkpoint stores " + std::to_string(meta.scalar_bytes * 8) + "-bit values, model uses " +
                    std::to_string(sizeof(T) * 8) + "-bit");
  const auto n_groups = r.pod<std::uint64_t>();
  if (n_groups != store.groups().size()) throw DataError(path + ": parameter group count mismatch");
  for (auto& g : store.groups()) {
    const auto name = r.str();
    if (name != g.name) throw DataError(path + ": expected group " + g.name + ", found " + name);
    g.step = r.pod<std::uint64_t>();
  }
  const auto n_params = r.pod<std::uint64_t>();
  if (n_params != store.params().size()) throw DataError(path + ": parameter count mismatch");
  for (auto& p : store.params()) {
    const auto name = r.str();
    if (name != p.name) throw DataError(path + ": expected parameter " + p.name + ", found " + name);
    const auto rows = r.pod<std::uint64_t>(), cols = r.pod<std::uint64_t>();
    if (rows != p.rows || cols != p.cols)
      throw DataError(path + ": " + p.name + " is " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " in the checkpoint, " + std::to_string(p.rows) + "x" + std::to_string(p.cols) + " in the model");
    r.array_into(p.value, p.name);
    r.array_into(p.m, p.name + " (m)");
    r.array_into(p.v, p.name + " (v)");
  }
  store.zero_grad();
  return meta;
}

}  // namespace diffks
