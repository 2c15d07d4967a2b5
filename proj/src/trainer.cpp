// SPDX-License-Identifier: Apache-2.0

#include "veinatn/trainer.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "veinatn/error.hpp"
#include "veinatn/image.hpp"
#include "veinatn/rng.hpp"

namespace veinatn {
namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kAugmentStream = 0x4155474dULL;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<GrayImage> load_split(const std::vector<SampleRef>& split, const TrainOptions& o, int size) {
  std::vector<GrayImage> out(split.size());
  parallel_for(split.size(), o.threads, [&](std::size_t i) {
    out[i] = prepare_image(load_image(split[i].path), o.stream, o.clahe, size);
  });
  return out;
}

std::vector<int> labels_of(const std::vector<SampleRef>& split) {
  std::vector<int> out;
  out.reserve(split.size());
  for (const auto& s : split) out.push_back(s.identity);
  return out;
}

std::size_t arg_max(const Tensor<float>& p) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < p.size(); ++k) {
    if (p[k] > p[best]) best = k;
  }
  return best;
}

std::string describe_sample(const SampleRef& s, int variant) {
  return s.path.string() + (variant == 0 ? std::string(" (original)")
                                         : " (" + std::string(augmentation_name(static_cast<Augmentation>(variant - 1))) + ")");
}

}  // namespace

std::string_view stream_name(Stream s) { return s == Stream::kNormal ? "normal" : "enhanced"; }

Stream parse_stream(std::string_view name) {
  if (name == "normal") return Stream::kNormal;
  if (name == "enhanced") return Stream::kEnhanced;
  throw ConfigError("unknown stream '" + std::string(name) + "' (expected normal or enhanced)");
}

GrayImage prepare_image(const GrayImage& raw, Stream stream, const ClaheParams& clahe, int size) {
  const GrayImage base = stream == Stream::kEnhanced ? veinatn::clahe(raw, clahe) : raw;
  if (base.width() == size && base.height() == size) return base;
  return resize_bilinear(base, size, size);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::size_t error_index = n;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double accuracy(const Model& model, const std::vector<GrayImage>& inputs, const std::vector<int>& labels,
                int threads) {
  if (inputs.empty()) return kNaN;
  std::vector<char> hit(inputs.size(), 0);
  parallel_for(inputs.size(), threads, [&](std::size_t i) {
    const auto p = predict(model.config, model.params, to_network_input<float>(inputs[i], model.config.input_size));
    hit[i] = arg_max(p) == static_cast<std::size_t>(labels[i]);
  });
  std::size_t correct = 0;
  for (char h : hit) correct += static_cast<std::size_t>(h);
  return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

TrainResult train_from(const Model& start, const ProtocolSpec& protocol, const TrainOptions& o,
                       const EpochCallback& on_epoch) {
  if (protocol.train.empty()) throw ConfigError("protocol '" + protocol.name + "' has an empty train split");
  if (o.batch < 1) throw ConfigError("batch must be >= 1");
  if (o.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(o.adam.lr > 0.0)) throw ConfigError("lr must be positive");
  if (start.config.num_classes != protocol.num_identities()) {
    throw ConfigError("model has " + std::to_string(start.config.num_classes) + " classes, protocol has " +
                      std::to_string(protocol.num_identities()) + " identities");
  }
  check_params(start.config, start.params);

  const int size = start.config.input_size;
  const std::vector<GrayImage> train_imgs = load_split(protocol.train, o, size);
  const std::vector<GrayImage> val_imgs = load_split(protocol.val, o, size);
  const std::vector<int> train_labels = labels_of(protocol.train), val_labels = labels_of(protocol.val);
  const auto k = static_cast<std::size_t>(start.config.num_classes);

  Model model = start;
  std::vector<Shape> shapes;
  std::vector<bool> trainable;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    shapes.push_back(model.params.tensors[i].shape());
    trainable.push_back(!o.freeze_backbone || is_classifier_param(model.params.names[i]));
  }
  AdamState<float> adam(shapes, o.adam);

  const int variants = o.augment ? 1 + kAugmentCount : 1;
  std::vector<std::pair<std::uint32_t, std::uint8_t>> order;
  for (std::uint32_t i = 0; i < train_imgs.size(); ++i) {
    for (int v = 0; v < variants; ++v) order.emplace_back(i, static_cast<std::uint8_t>(v));
  }

  TrainResult result;
  result.samples_per_epoch = order.size();
  Model best = model;
  double best_val = -1.0;
  const auto batch = static_cast<std::size_t>(o.batch);

  struct Slot {
    std::vector<Tensor<float>> grads;
    double loss = 0.0;
  };
  std::vector<Slot> slots(batch);

  for (int epoch = 1; epoch <= o.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(o.seed, {kShuffleStream, static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    const std::size_t num_batches = (order.size() + batch - 1) / batch;
    for (std::size_t b = 0; b < num_batches; ++b) {
      const std::size_t begin = b * batch, end = std::min(order.size(), begin + batch);
      const std::size_t count = end - begin;
      try {
        parallel_for(count, o.threads, [&](std::size_t j) {
          const auto [img_idx, variant] = order[begin + j];
          const GrayImage& base = train_imgs[img_idx];
          const GrayImage sample =
              variant == 0
                  ? base
                  : augment_variant(base,
                                    derive_seed(o.seed, {kAugmentStream, static_cast<std::uint64_t>(epoch), img_idx}),
                                    static_cast<Augmentation>(variant - 1));
          Tensor<float> target(Shape{1, k});
          target[static_cast<std::size_t>(train_labels[img_idx])] = 1.0f;
          Tape<float> tape;
          const auto g = build_forward(tape, model.config, model.params, to_network_input<float>(sample, size), true);
          const auto loss = cross_entropy_loss(g.probs, target, model.config.loss_mode);
          tape.backward(loss);
          Slot& slot = slots[j];
          slot.loss = loss.value().item();
          slot.grads.resize(g.params.size());
          for (std::size_t p = 0; p < g.params.size(); ++p) slot.grads[p] = tape.grad(g.params[p]);
        });
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) + " of " +
                           std::to_string(num_batches) + ": " + e.what());
      }
      double batch_loss = 0.0;
      std::vector<Tensor<float>> grads = slots[0].grads;
      batch_loss += slots[0].loss;
      for (std::size_t j = 1; j < count; ++j) {
        batch_loss += slots[j].loss;
        for (std::size_t p = 0; p < grads.size(); ++p) {
          auto dst = grads[p].data();
          const auto src = slots[j].grads[p].data();
          for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += src[q];
        }
      }
      if (!std::isfinite(batch_loss)) {
        const auto [img_idx, variant] = order[begin];
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) +
                           " (first sample " + describe_sample(protocol.train[img_idx], variant) + ")");
      }
      const float inv = 1.0f / static_cast<float>(count);
      for (auto& gt : grads) {
        for (float& v : gt.data()) v *= inv;
      }
      adam.step(model.params.tensors, grads, trainable);
      loss_sum += batch_loss;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.val_accuracy = val_imgs.empty() ? kNaN : accuracy(model, val_imgs, val_labels, o.threads);
    stats.train_accuracy = o.track_train_accuracy ? accuracy(model, train_imgs, train_labels, o.threads) : kNaN;
    result.curves.push_back(stats);
    if (on_epoch) on_epoch(stats);

    if (val_imgs.empty()) {
      best = model;
      result.selected_epoch = epoch;
    } else if (stats.val_accuracy > best_val) {
      best_val = stats.val_accuracy;
      best = model;
      result.selected_epoch = epoch;
    }
    if (o.stop_when && o.stop_when(model, stats)) break;
  }

  result.checkpoint.model = std::move(best);
  result.checkpoint.meta.epoch = result.selected_epoch;
  result.checkpoint.meta.seed = o.seed;
  result.checkpoint.meta.stream = std::string(stream_name(o.stream));
  result.checkpoint.meta.clahe = o.clahe;
  for (const auto& s : result.curves) {
    result.checkpoint.meta.loss_curve.push_back(s.train_loss);
    result.checkpoint.meta.val_accuracy.push_back(s.val_accuracy);
  }
  return result;
}

TrainResult train(const ModelConfig& config, const ProtocolSpec& protocol, const TrainOptions& options,
                  const EpochCallback& on_epoch) {
  ModelConfig c = config;
  c.num_classes = protocol.num_identities();
  c.validate();
  const Model start{c, init_model(c, options.seed)};
  return train_from(start, protocol, options, on_epoch);
}

TrainResult finetune(const Checkpoint& source, const ProtocolSpec& protocol, const TrainOptions& options,
                     const EpochCallback& on_epoch) {
  if (protocol.train.empty()) {
    throw ConfigError("protocol '" + protocol.name + "' has an empty finetune split");
  }
  const Model start = reshape_head(source.model, protocol.num_identities(), options.seed);
  return train_from(start, protocol, options, on_epoch);
}

void write_curves_csv(const std::vector<EpochStats>& curves, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_accuracy\n";
  for (const auto& s : curves) {
    out << s.epoch << ',' << format_sig(s.train_loss, 9) << ',' << format_sig(s.val_accuracy, 9) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TrainConfig default_train_config() { return {}; }

TrainConfig parse_train_config(const KeyValueText& text) {
  TrainConfig c;
  auto& o = c.options;
  o.adam.lr = text.require_double("lr", "0.0001");
  o.batch = static_cast<int>(text.require_int("batch", "16"));
  o.epochs = static_cast<int>(text.require_int("epochs", "150"));
  c.model.num_conv_blocks = static_cast<int>(text.require_int("blocks", "3"));
  c.model.num_heads = static_cast<int>(text.require_int("heads", "4"));
  c.model.qk_dim = static_cast<int>(text.require_int("qk_dim", "64"));
  o.stream = parse_stream(text.require("stream", "normal"));
  o.seed = static_cast<std::uint64_t>(text.require_int("seed", "0"));
  c.model.loss_mode = parse_loss_mode(text.require("loss_mode", "binary"));
  const auto tiles = parse_int_list(text.require("clahe_tiles", "8x8"), "clahe_tiles");
  if (tiles.size() != 2) throw ConfigError("clahe_tiles needs two values, e.g. clahe_tiles = 8x8");
  o.clahe.tiles_x = static_cast<int>(tiles[0]);
  o.clahe.tiles_y = static_cast<int>(tiles[1]);
  o.clahe.clip_limit = text.require_double("clahe_clip", "2.0");

  c.model.input_size = static_cast<int>(text.get_int("input_size", c.model.input_size));
  c.model.filters = static_cast<int>(text.get_int("filters", c.model.filters));
  c.model.groupnorm_groups = static_cast<int>(text.get_int("groups", c.model.groupnorm_groups));
  c.model.pool_grid = static_cast<int>(text.get_int("pool_grid", c.model.pool_grid));
  c.model.v_dim = static_cast<int>(text.get_int("v_dim", c.model.v_dim));
  c.model.attention_residual = text.get_int("attention_residual", 0) != 0;
  if (auto ks = text.get("kernel_sizes")) {
    c.model.kernel_sizes.clear();
    for (long v : parse_int_list(*ks, "kernel_sizes")) c.model.kernel_sizes.push_back(static_cast<int>(v));
  } else {
    c.model.kernel_sizes = ModelConfig::default_kernels(c.model.num_conv_blocks);
  }
  o.augment = text.get_int("augment", 1) != 0;
  o.freeze_backbone = text.get_int("freeze_backbone", 0) != 0;
  c.model.validate();
  return c;
}

KeyValueText train_config_to_text(const TrainConfig& c) {
  KeyValueText t;
  const auto& o = c.options;
  t.set("lr", format_double(o.adam.lr));
  t.set("batch", std::to_string(o.batch));
  t.set("epochs", std::to_string(o.epochs));
  t.set("blocks", std::to_string(c.model.num_conv_blocks));
  t.set("heads", std::to_string(c.model.num_heads));
  t.set("qk_dim", std::to_string(c.model.qk_dim));
  t.set("stream", std::string(stream_name(o.stream)));
  t.set("seed", std::to_string(o.seed));
  t.set("loss_mode", std::string(loss_mode_name(c.model.loss_mode)));
  t.set("clahe_tiles", std::to_string(o.clahe.tiles_x) + "x" + std::to_string(o.clahe.tiles_y));
  t.set("clahe_clip", format_double(o.clahe.clip_limit));
  t.set("input_size", std::to_string(c.model.input_size));
  t.set("filters", std::to_string(c.model.filters));
  t.set("groups", std::to_string(c.model.groupnorm_groups));
  t.set("pool_grid", std::to_string(c.model.pool_grid));
  t.set("v_dim", std::to_string(c.model.v_dim));
  std::string ks;
  for (std::size_t i = 0; i < c.model.kernel_sizes.size(); ++i) {
    ks += (i ? "," : "") + std::to_string(c.model.kernel_sizes[i]);
  }
  t.set("kernel_sizes", ks);
  t.set("attention_residual", c.model.attention_residual ? "1" : "0");
  t.set("augment", o.augment ? "1" : "0");
  t.set("freeze_backbone", o.freeze_backbone ? "1" : "0");
  return t;
}

}  // namespace veinatn
