// SPDX-License-Identifier: Apache-2.0

#include "veinatn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "veinatn/error.hpp"
#include "veinatn/image.hpp"
#include "veinatn/keyvalue.hpp"
#include "veinatn/rng.hpp"

namespace veinatn {
namespace fs = std::filesystem;
namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".pgm" || ext == ".png";
}

std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return out;
}

std::string three_digits(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", v);
  return buf;
}

}  // namespace

DatasetTree scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  DatasetTree tree;
  tree.root = root;
  for (const auto& id_dir : sorted_entries(root)) {
    const std::string id = id_dir.filename().string();
    if (!fs::is_directory(id_dir)) {
      throw FormatError("layout: expected identity directory, found file " + id_dir.string());
    }
    std::vector<std::vector<fs::path>> sessions;
    std::vector<std::string> session_names;
    for (const auto& s_dir : sorted_entries(id_dir)) {
      if (!fs::is_directory(s_dir)) {
        throw FormatError("layout: expected session directory under identity '" + id + "', found file " +
                          s_dir.string());
      }
      std::vector<fs::path> files;
      for (const auto& f : sorted_entries(s_dir)) {
        if (!fs::is_regular_file(f) || !is_image_file(f)) {
          throw FormatError("layout: " + f.string() + " is not a .pgm/.png sample file");
        }
        files.push_back(f);
      }
      if (files.empty()) throw FormatError("layout: empty session directory " + s_dir.string());
      sessions.push_back(std::move(files));
      session_names.push_back(s_dir.filename().string());
    }
    if (sessions.empty()) throw FormatError("layout: identity '" + id + "' has no session directories");
    tree.identities.push_back(id);
    tree.samples.push_back(std::move(sessions));
    tree.sessions.push_back(std::move(session_names));
  }
  if (tree.identities.empty()) throw FormatError("layout: no identity directories under " + root.string());
  return tree;
}

ProtocolSpec build_protocol(const fs::path& root, std::string_view protocol) {
  return build_protocol(scan_dataset(root), protocol);
}

ProtocolSpec build_protocol(const DatasetTree& tree, std::string_view protocol) {
  ProtocolSpec spec;
  spec.name = std::string(protocol);
  spec.root = tree.root;
  spec.identities = tree.identities;

  long n_train = 0, n_val = 0, n_test = 0;
  if (protocol == "fv300") {
    spec.kind = ProtocolKind::kSplit;
    n_train = 70, n_val = 12, n_test = 10;
  } else if (protocol.starts_with("split:")) {
    spec.kind = ProtocolKind::kSplit;
    const auto counts = parse_int_list(protocol.substr(6), "split protocol");
    if (counts.size() != 3 || counts[0] < 0 || counts[1] < 0 || counts[2] < 0) {
      throw ConfigError("split protocol needs three non-negative counts, e.g. split:70,12,10");
    }
    n_train = counts[0], n_val = counts[1], n_test = counts[2];
  } else if (protocol == "session" || protocol == "fvusm" || protocol == "polyu") {
    spec.kind = ProtocolKind::kSession;
  } else if (protocol == "heldin") {
    spec.kind = ProtocolKind::kHeldIn;
  } else {
    throw ConfigError("unknown protocol '" + std::string(protocol) +
                      "' (expected fv300, split:A,B,C, session, fvusm, polyu or heldin)");
  }

  for (std::size_t i = 0; i < tree.identities.size(); ++i) {
    const int id = static_cast<int>(i);
    const auto& sessions = tree.samples[i];
    if (spec.kind == ProtocolKind::kSession) {
      if (sessions.size() < 2) {
        throw FormatError("identity '" + tree.identities[i] + "' has " + std::to_string(sessions.size()) +
                          " session(s); the session protocol needs two");
      }
      for (const auto& p : sessions[0]) spec.train.push_back({p, id});
      for (const auto& p : sessions[1]) spec.test.push_back({p, id});
      continue;
    }
    std::vector<fs::path> all;
    for (const auto& s : sessions) all.insert(all.end(), s.begin(), s.end());
    if (spec.kind == ProtocolKind::kHeldIn) {
      for (const auto& p : all) {
        spec.train.push_back({p, id});
        spec.test.push_back({p, id});
      }
      continue;
    }
    const auto need = static_cast<std::size_t>(n_train + n_val + n_test);
    if (all.size() != need) {
      throw FormatError("identity '" + tree.identities[i] + "' has " + std::to_string(all.size()) +
                        " samples; protocol " + spec.name + " needs exactly " + std::to_string(need));
    }
    for (std::size_t k = 0; k < all.size(); ++k) {
      const auto kl = static_cast<long>(k);
      auto& dst = kl < n_train ? spec.train : kl < n_train + n_val ? spec.val : spec.test;
      dst.push_back({all[k], id});
    }
  }
  return spec;
}

void make_toy_dataset(const fs::path& root, int identities, int samples, int size, std::uint64_t seed,
                      int sessions) {
  if (identities < 1 || samples < 1 || size < 16 || sessions < 1 || samples % sessions != 0) {
    throw ConfigError("make_toy_dataset: need identities >= 1, samples >= 1 divisible by sessions, size >= 16");
  }
  struct Curve {
    double base, amp, freq, phase, width, depth;
  };
  const double s = size;
  for (int id = 0; id < identities; ++id) {
    Rng shape_rng(derive_seed(seed, {0, static_cast<std::uint64_t>(id)}));
    std::vector<Curve> curves;
    const int count = 3 + static_cast<int>(shape_rng.below(3));
    for (int c = 0; c < count; ++c) {
      curves.push_back({shape_rng.uniform(0.15, 0.85) * s, shape_rng.uniform(0.03, 0.15) * s,
                        shape_rng.uniform(0.5, 2.5) * 2.0 * std::numbers::pi / s,
                        shape_rng.uniform(0.0, 2.0 * std::numbers::pi), shape_rng.uniform(0.02, 0.04) * s,
                        shape_rng.uniform(60.0, 110.0)});
    }
    const fs::path id_dir = root / ("id" + three_digits(id));
    for (int k = 0; k < samples; ++k) {
      Rng rng(derive_seed(seed, {1, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(k)}));
      const double dx = rng.uniform(-0.03, 0.03) * s, dy = rng.uniform(-0.03, 0.03) * s;
      const double width_jitter = rng.uniform(0.9, 1.1);
      const double brightness = rng.uniform(-10.0, 10.0);
      GrayImage img(size, size);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          double v = 170.0 + brightness + 30.0 * std::sin(std::numbers::pi * (y + 0.5) / s);
          for (const auto& c : curves) {
            const double yc = c.base + c.amp * std::sin(c.freq * (x - dx) + c.phase) + dy;
            const double w = c.width * width_jitter;
            const double d = (y - yc) / w;
            v -= c.depth * std::exp(-0.5 * d * d);
          }
          v += rng.normal(0.0, 3.0);
          img.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
      const int per_session = samples / sessions;
      const fs::path dir = id_dir / ("s" + std::to_string(k / per_session + 1));
      fs::create_directories(dir);
      save_pgm(img, dir / (three_digits(k % per_session) + ".pgm"));
    }
  }
}

void make_mock_tree(const fs::path& root, int identities, int sessions, int samples_per_session) {
  for (int id = 0; id < identities; ++id) {
    for (int s = 0; s < sessions; ++s) {
      const fs::path dir = root / ("id" + three_digits(id)) / ("s" + std::to_string(s + 1));
      fs::create_directories(dir);
      for (int k = 0; k < samples_per_session; ++k) {
        std::ofstream out(dir / (three_digits(k) + ".pgm"), std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create mock sample under " + dir.string());
      }
    }
  }
}

}  // namespace veinatn
