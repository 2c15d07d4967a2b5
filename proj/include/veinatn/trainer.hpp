// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "veinatn/adam.hpp"
#include "veinatn/checkpoint.hpp"
#include "veinatn/dataset.hpp"
#include "veinatn/imageproc.hpp"
#include "veinatn/keyvalue.hpp"
#include "veinatn/model.hpp"

namespace veinatn {

enum class Stream { kNormal, kEnhanced };

std::string_view stream_name(Stream s);
Stream parse_stream(std::string_view name);

// Stream preprocessing: the enhanced stream applies CLAHE to the raw image;
// the result is then resized to size x size.
GrayImage prepare_image(const GrayImage& raw, Stream stream, const ClaheParams& clahe, int size);

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;    // NaN without a val split
  double train_accuracy = 0.0;  // NaN unless tracked
};

struct TrainOptions {
  AdamHyper adam;
  int batch = 16;
  int epochs = 150;
  bool augment = true;
  std::uint64_t seed = 0;
  Stream stream = Stream::kNormal;
  ClaheParams clahe;
  // Only the classifier is updated.
  bool freeze_backbone = false;
  // Worker threads for per-sample gradients; results do not depend on it.
  int threads = 1;
  // Also measures accuracy on the unaugmented train images after each epoch.
  bool track_train_accuracy = false;
  // Evaluated after every epoch with the current model; returning true
  // ends training early.
  std::function<bool(const Model&, const EpochStats&)> stop_when;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochStats> curves;
  int selected_epoch = 0;
  std::size_t samples_per_epoch = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Trains a freshly initialized model on protocol.train. The returned
// checkpoint holds the parameters of the epoch with the best val accuracy
// (first one on ties), or of the last epoch when there is no val split.
TrainResult train(const ModelConfig& config, const ProtocolSpec& protocol, const TrainOptions& options,
                  const EpochCallback& on_epoch = {});

// Replaces the classifier for the protocol's identity count and trains the
// whole network (or only the classifier with freeze_backbone) on
// protocol.train.
TrainResult finetune(const Checkpoint& source, const ProtocolSpec& protocol, const TrainOptions& options,
                     const EpochCallback& on_epoch = {});

// Continues training `start` on protocol.train; shared by train and
// finetune.
TrainResult train_from(const Model& start, const ProtocolSpec& protocol, const TrainOptions& options,
                       const EpochCallback& on_epoch = {});

// Fraction of samples whose arg-max class equals the identity.
double accuracy(const Model& model, const std::vector<GrayImage>& inputs, const std::vector<int>& labels,
                int threads = 1);

// Curves CSV with header `epoch,train_loss,val_accuracy`.
void write_curves_csv(const std::vector<EpochStats>& curves, const std::filesystem::path& path);

struct TrainConfig {
  ModelConfig model;
  TrainOptions options;
};

// Defaults: lr 1e-4, batch 16, 150 epochs, default model.
TrainConfig default_train_config();

// Reads a training config. The keys lr, batch, epochs, blocks, heads,
// qk_dim, stream, seed, loss_mode, clahe_tiles and clahe_clip are
// required; input_size, filters, groups, pool_grid, v_dim, kernel_sizes,
// attention_residual, augment and freeze_backbone are optional.
TrainConfig parse_train_config(const KeyValueText& text);
KeyValueText train_config_to_text(const TrainConfig& config);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace veinatn
