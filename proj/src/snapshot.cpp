#include "mesp/snapshot.hpp"

#include <cstring>
#include <fstream>

namespace mesp {

namespace {

template <typename V>
void write_pod(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in, const std::string& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw std::runtime_error("snapshot: unexpected end of file in '" + path + "'");
  return v;
}

}  // namespace

template <typename T>
void save_snapshot(const std::string& path, ModelParams<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("snapshot: cannot open '" + path + "' for writing");
  out.write(kSnapshotMagic, sizeof(kSnapshotMagic));
  write_pod(out, kSnapshotVersion);
  write_pod(out, static_cast<uint32_t>(sizeof(T)));
  auto refs = all_params(params);
  write_pod(out, static_cast<uint32_t>(refs.size()));
  for (auto& p : refs) {
    write_pod(out, static_cast<uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_pod(out, static_cast<uint32_t>(p.tensor->rank()));
    for (int64_t ext : p.tensor->shape()) write_pod(out, ext);
    out.write(reinterpret_cast<const char*>(p.tensor->data()),
              static_cast<std::streamsize>(p.tensor->bytes()));
  }
  if (!out) throw std::runtime_error("snapshot: write failed for '" + path + "'");
}

template <typename T>
void load_snapshot(const std::string& path, ModelParams<T>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("snapshot: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kSnapshotMagic, sizeof(magic)) != 0)
    throw std::runtime_error("snapshot: '" + path + "' is not a parameter snapshot");
  auto version = read_pod<uint32_t>(in, path);
  if (version != kSnapshotVersion)
    throw std::runtime_error("snapshot: version " + std::to_string(version) + " unsupported");
  auto width = read_pod<uint32_t>(in, path);
  if (width != sizeof(T))
    throw std::runtime_error("snapshot: element width " + std::to_string(width) +
                             " does not match requested dtype width " +
                             std::to_string(sizeof(T)));
  auto refs = all_params(params);
  auto count = read_pod<uint32_t>(in, path);
  if (count != refs.size())
    throw std::runtime_error("snapshot: tensor count " + std::to_string(count) +
                             " does not match model (" + std::to_string(refs.size()) + ")");
  for (auto& p : refs) {
    auto name_len = read_pod<uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != p.name)
      throw std::runtime_error("snapshot: expected tensor '" + p.name + "', found '" + name + "'");
    auto rank = read_pod<uint32_t>(in, path);
    Shape shape(rank);
    for (auto& ext : shape) ext = read_pod<int64_t>(in, path);
    if (shape != p.tensor->shape())
      throw std::runtime_error("snapshot: tensor '" + name + "' shape " + shape_str(shape) +
                               " does not match model " + shape_str(p.tensor->shape()));
    in.read(reinterpret_cast<char*>(p.tensor->data()),
            static_cast<std::streamsize>(p.tensor->bytes()));
    if (!in) throw std::runtime_error("snapshot: unexpected end of file in '" + path + "'");
  }
}

template void save_snapshot<float>(const std::string&, ModelParams<float>&);
template void save_snapshot<double>(const std::string&, ModelParams<double>&);
template void load_snapshot<float>(const std::string&, ModelParams<float>&);
template void load_snapshot<double>(const std::string&, ModelParams<double>&);

}  // namespace mesp
