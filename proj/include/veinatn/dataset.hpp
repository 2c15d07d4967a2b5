// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace veinatn {

// One image file of a dataset tree, with the index of its identity in the
// sorted identity list.
struct SampleRef {
  std::filesystem::path path;
  int identity = 0;

  friend bool operator==(const SampleRef&, const SampleRef&) = default;
};

// Dataset tree `root/<identity>/<session>/<sample>.pgm|png`.
struct DatasetTree {
  std::filesystem::path root;
  std::vector<std::string> identities;  // sorted
  // samples[i][s] lists the files of session s (sessions sorted) of
  // identity i, sorted by file name.
  std::vector<std::vector<std::vector<std::filesystem::path>>> samples;
  std::vector<std::vector<std::string>> sessions;
};

// Lists a dataset tree. Throws IoError/FormatError on layout violations
// (missing directories, stray files, non-image files, empty sessions).
DatasetTree scan_dataset(const std::filesystem::path& root);

enum class ProtocolKind {
  // Per identity, samples in (session, file) order: first n_train train,
  // next n_val val, last n_test test. Totals must match exactly.
  kSplit,
  // First session enrolls/fine-tunes (train split), second session tests.
  kSession,
  // Every sample is both a train and a test sample.
  kHeldIn,
};

struct ProtocolSpec {
  std::string name;
  ProtocolKind kind = ProtocolKind::kSplit;
  std::filesystem::path root;
  std::vector<std::string> identities;
  std::vector<SampleRef> train, val, test;

  int num_identities() const { return static_cast<int>(identities.size()); }
};

// Protocol names:
//   fv300           split 70/12/10
//   split:A,B,C     split with A train, B val, C test per identity
//   session, fvusm, polyu   session protocol
//   heldin          all samples train and test
ProtocolSpec build_protocol(const std::filesystem::path& root, std::string_view protocol);
ProtocolSpec build_protocol(const DatasetTree& tree, std::string_view protocol);

// Writes `identities` x `samples` procedural vein-like images (size x size
// PGM) into root/idNN/s1/NN.pgm. Each identity has its own set of curved
// dark lines; samples differ by small shifts, line-width jitter and noise.
// With sessions = 2 the samples are split evenly over s1 and s2.
void make_toy_dataset(const std::filesystem::path& root, int identities, int samples, int size,
                      std::uint64_t seed, int sessions = 1);

// Writes empty placeholder files in the dataset layout, for protocol
// arithmetic that never reads pixels.
void make_mock_tree(const std::filesystem::path& root, int identities, int sessions, int samples_per_session);

}  // namespace veinatn
