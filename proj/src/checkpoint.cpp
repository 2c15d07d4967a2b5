// SPDX-License-Identifier: Apache-2.0

#include "veinatn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace veinatn {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'V', 'A', 'N', 'N'};

class Writer {
 public:
  template <typename U>
  void put(U v) {
    std::uint8_t buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    bytes.insert(bytes.end(), buf, buf + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (size_ - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == size_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(parse_double(s.substr(start, comma - start), "meta curve"));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size, std::uint64_t h) {
  for (std::size_t i = 0; i < size; ++i) h = (h ^ data[i]) * 0x100000001b3ULL;
  return h;
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a64(reinterpret_cast<const std::uint8_t*>(buf), static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  check_params(ckpt.model.config, ckpt.model.params);
  KeyValueText text = model_config_to_text(ckpt.model.config);
  text.set("meta.epoch", std::to_string(ckpt.meta.epoch));
  text.set("meta.seed", std::to_string(ckpt.meta.seed));
  text.set("meta.stream", ckpt.meta.stream);
  text.set("meta.loss_curve", join_doubles(ckpt.meta.loss_curve));
  text.set("meta.val_accuracy", join_doubles(ckpt.meta.val_accuracy));
  text.set("meta.clahe_tiles",
           std::to_string(ckpt.meta.clahe.tiles_x) + "x" + std::to_string(ckpt.meta.clahe.tiles_y));
  text.set("meta.clahe_clip", format_double(ckpt.meta.clahe.clip_limit));
  const std::string block = text.serialize();

  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(block.size()));
  w.put_bytes(block.data(), block.size());
  const auto& p = ckpt.model.params;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.names[i].size()));
    w.put_bytes(p.names[i].data(), p.names[i].size());
    const Shape& s = p.tensors[i].shape();
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.size()));
    for (std::size_t e : s) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    w.put_bytes(p.tensors[i].data().data(), p.tensors[i].size() * sizeof(float));
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 + 2 + 4 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint (bad magic or too short)");
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (fnv1a64(bytes.data(), body) != stored) throw FormatError("checkpoint checksum mismatch");

  Reader r(bytes.data(), body);
  r.take(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto text_len = r.get<std::uint32_t>();
  const auto* text_ptr = reinterpret_cast<const char*>(r.take(text_len));
  const KeyValueText text = KeyValueText::parse(std::string_view(text_ptr, text_len));

  Checkpoint ckpt;
  ckpt.model.config = model_config_from_text(text);
  ckpt.meta.epoch = static_cast<int>(text.get_int("meta.epoch", 0));
  ckpt.meta.seed = static_cast<std::uint64_t>(std::stoull(text.get("meta.seed").value_or("0")));
  ckpt.meta.stream = text.get("meta.stream").value_or("");
  ckpt.meta.loss_curve = split_doubles(text.get("meta.loss_curve").value_or(""));
  ckpt.meta.val_accuracy = split_doubles(text.get("meta.val_accuracy").value_or(""));
  if (auto tiles = text.get("meta.clahe_tiles")) {
    const auto t = parse_int_list(*tiles, "meta.clahe_tiles");
    if (t.size() != 2) throw FormatError("checkpoint meta.clahe_tiles needs two values");
    ckpt.meta.clahe.tiles_x = static_cast<int>(t[0]);
    ckpt.meta.clahe.tiles_y = static_cast<int>(t[1]);
  }
  ckpt.meta.clahe.clip_limit = text.get_double("meta.clahe_clip", ckpt.meta.clahe.clip_limit);

  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    const auto* name_ptr = reinterpret_cast<const char*>(r.take(name_len));
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>();
    const std::size_t n = shape_numel(shape);
    std::vector<float> data(n);
    std::memcpy(data.data(), r.take(n * sizeof(float)), n * sizeof(float));
    ckpt.model.params.names.emplace_back(name_ptr, name_len);
    ckpt.model.params.tensors.emplace_back(std::move(shape), std::move(data));
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes before the checksum");
  check_params(ckpt.model.config, ckpt.model.params);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace veinatn
