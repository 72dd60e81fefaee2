#include "dseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "dseg/report.hpp"

namespace fs = std::filesystem;

namespace dseg {

// ---------------------------------------------------------------------------
// config parsing

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "' expects a boolean, got: " + v);
}

double parse_num(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got: " + v);
  }
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) parts.push_back(trim(part));
  return parts;
}

}  // namespace

TrainConfig parse_train_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  TrainConfig cfg;
  for (const auto& [key, value] : pairs) {
    if (key == "variant") {
      cfg.variant = variant_from_token(value);
    } else if (key == "loss") {
      cfg.loss = loss_from_token(value);
    } else if (key == "gamma") {
      cfg.gamma = parse_num(key, value);
    } else if (key == "lr_init") {
      cfg.lr_init = parse_num(key, value);
    } else if (key == "epochs") {
      cfg.epochs = int(parse_num(key, value));
    } else if (key == "batch_size") {
      cfg.batch_size = int(parse_num(key, value));
    } else if (key == "split") {
      auto parts = split_on(value, ',');
      check_config(parts.size() == 3, "split expects three ratios");
      cfg.split = {parse_num(key, parts[0]), parse_num(key, parts[1]),
                   parse_num(key, parts[2])};
    } else if (key == "seed") {
      cfg.seed = std::stoull(value);
    } else if (key == "data") {
      auto parts = split_on(value, ':');
      if (parts.size() >= 1 && parts[0] == "synthetic") {
        cfg.synthetic = true;
        if (parts.size() >= 2) cfg.synth_n = int(parse_num(key, parts[1]));
        if (parts.size() >= 3) cfg.img_size = int(parse_num(key, parts[2]));
        check_config(parts.size() <= 3, "data=synthetic:<n>[:<size>]");
      } else if (parts.size() == 2 && parts[0] == "dir") {
        cfg.synthetic = false;
        cfg.data_dir = parts[1];
      } else {
        throw ConfigError("data expects synthetic:<n>[:<size>] or dir:<path>");
      }
    } else if (key == "img_size") {
      cfg.img_size = int(parse_num(key, value));
    } else if (key == "base_channels") {
      cfg.base_channels = int(parse_num(key, value));
    } else if (key == "depth") {
      cfg.depth = int(parse_num(key, value));
    } else if (key == "modulated") {
      cfg.modulated = parse_bool(key, value);
    } else if (key == "patience") {
      cfg.patience = int(parse_num(key, value));
    } else if (key == "augment") {
      cfg.augment = parse_bool(key, value);
    } else if (key == "out_dir") {
      cfg.out_dir = value;
    } else if (key == "resume") {
      cfg.resume = value;
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  check_config(cfg.lr_init > 0, "lr_init must be positive");
  check_config(cfg.epochs >= 1, "epochs must be >= 1");
  check_config(cfg.batch_size >= 1, "batch_size must be >= 1");
  check_config(cfg.gamma >= 0, "gamma must be non-negative");
  return cfg;
}

TrainConfig parse_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path);
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    check_config(eq != std::string::npos,
                 "config line " + std::to_string(lineno) + " is not key=value");
    pairs.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return parse_train_pairs(pairs);
}

// ---------------------------------------------------------------------------
// optimizer & schedule

Adam::Adam(ParamStore& store) : store_(&store) {
  const auto& entries = store.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    entry_idx_.push_back(i);
    m_.emplace_back(entries[i].tensor.shape);
    v_.emplace_back(entries[i].tensor.shape);
  }
}

void Adam::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(kBeta1, double(t_));
  double bc2 = 1.0 - std::pow(kBeta2, double(t_));
  for (size_t k = 0; k < entry_idx_.size(); ++k) {
    auto& e = store_->entries()[entry_idx_[k]];
    check_dim(e.tensor.grad.size() == e.tensor.data.size(),
              "parameter has no gradient: " + e.name);
    float* th = e.tensor.data.data();
    const float* gr = e.tensor.grad.data();
    float* m = m_[k].data.data();
    float* v = v_[k].data.data();
    for (size_t i = 0; i < e.tensor.data.size(); ++i) {
      if (!std::isfinite(gr[i]))
        throw StateError("non-finite gradient in " + e.name + "; aborting");
      double g = double(gr[i]);
      double mi = kBeta1 * double(m[i]) + (1.0 - kBeta1) * g;
      double vi = kBeta2 * double(v[i]) + (1.0 - kBeta2) * g * g;
      m[i] = float(mi);
      v[i] = float(vi);
      th[i] = float(double(th[i]) -
                    lr * (mi / bc1) / (std::sqrt(vi / bc2) + kEps));
    }
  }
}

std::vector<TensorRecord> Adam::state_records() const {
  std::vector<TensorRecord> out;
  for (size_t k = 0; k < entry_idx_.size(); ++k) {
    const auto& e = store_->entries()[entry_idx_[k]];
    out.push_back({"adam.m." + e.name, m_[k]});
    out.push_back({"adam.v." + e.name, v_[k]});
  }
  out.push_back({"adam.t", Tensor::scalar(float(t_))});
  return out;
}

void Adam::load_state(const ParamStore& records) {
  for (size_t k = 0; k < entry_idx_.size(); ++k) {
    const auto& e = store_->entries()[entry_idx_[k]];
    const Tensor& m = records.at("adam.m." + e.name);
    const Tensor& v = records.at("adam.v." + e.name);
    check_dim(m.shape == e.tensor.shape && v.shape == e.tensor.shape,
              "optimizer state shape mismatch for " + e.name);
    m_[k].data = m.data;
    v_[k].data = v.data;
  }
  t_ = int64_t(records.at("adam.t").data[0]);
}

PlateauSchedule::PlateauSchedule(int patience, double min_delta, double floor)
    : patience_(patience),
      min_delta_(min_delta),
      floor_(floor),
      best_(-std::numeric_limits<double>::infinity()) {
  check_config(patience >= 1, "schedule patience must be >= 1");
}

double PlateauSchedule::update(double metric, double lr) {
  if (metric > best_ + min_delta_) {
    best_ = metric;
    stale_ = 0;
    return lr;
  }
  if (++stale_ >= patience_) {
    stale_ = 0;
    return std::max(lr / 2.0, floor_);
  }
  return lr;
}

// ---------------------------------------------------------------------------
// data plumbing

DatasetSplits load_splits(const TrainConfig& cfg) {
  if (cfg.synthetic)
    return split_samples(make_synthetic_set(cfg.synth_n, cfg.img_size, cfg.seed),
                         cfg.split, cfg.seed);
  return load_dataset(cfg.data_dir, cfg.split, cfg.seed, cfg.img_size);
}

std::vector<double> train_class_weights(
    const TrainConfig& cfg, const std::vector<SegmentationSample>& train_set) {
  if (cfg.loss != LossKind::wf)
    return std::vector<double>(ClassMap::kNumClasses, 1.0);
  return class_weights_enet(class_frequencies(train_set), 1.02);
}

namespace {

// The live learning rate (and friends) must survive the f32 record format
// bit-exactly or a resumed run slowly drifts off the uninterrupted one, so
// doubles ride in 16-bit chunks the way the model seed does.
Tensor encode_f64(double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  Tensor rec(Shape{4});
  for (int i = 0; i < 4; ++i)
    rec.data[size_t(i)] = float(uint16_t(bits >> (16 * i)));
  return rec;
}

double decode_f64(const Tensor& rec) {
  check_dim(rec.shape == Shape{4}, "encoded double must have four chunks");
  uint64_t bits = 0;
  for (int i = 0; i < 4; ++i)
    bits |= uint64_t(uint16_t(rec.data[size_t(i)])) << (16 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

// Stack sample copies (optionally augmented) into one batch.
void fill_batch(const std::vector<SegmentationSample>& set,
                const std::vector<size_t>& order, size_t i0, size_t bsz,
                bool do_augment, Rng* rng, Tensor* images, ClassMask* target) {
  int h = set[order[i0]].mask.h, w = set[order[i0]].mask.w;
  size_t plane = size_t(h) * w;
  *images = Tensor(Shape{int(bsz), 3, h, w});
  *target = ClassMask(int(bsz), h, w);
  for (size_t j = 0; j < bsz; ++j) {
    SegmentationSample s = set[order[i0 + j]];
    if (do_augment) augment_in_place(s, *rng);
    std::copy(s.image.data.begin(), s.image.data.end(),
              images->data.begin() + j * 3 * plane);
    std::copy(s.mask.v.begin(), s.mask.v.end(), target->v.begin() + j * plane);
  }
}

void write_curves_csv(const std::string& path, const std::vector<EpochRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os.precision(12);  // resume reads these back; keep them lossless in practice
  os << "epoch,train_loss,val_loss,val_miou\n";
  for (const EpochRow& r : rows)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ','
       << r.val_miou << '\n';
}

std::vector<EpochRow> read_curves_csv(const std::string& path) {
  std::ifstream is(path);
  std::vector<EpochRow> rows;
  if (!is) return rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    auto parts = split_on(line, ',');
    if (parts.size() != 4) continue;
    rows.push_back(EpochRow{int(std::stod(parts[0])), std::stod(parts[1]),
                            std::stod(parts[2]), std::stod(parts[3])});
  }
  return rows;
}

}  // namespace

EvalResult evaluate_model(Model& model, const std::vector<SegmentationSample>& set,
                          LossKind loss, double gamma,
                          const std::vector<double>& class_weights) {
  check_config(!set.empty(), "cannot evaluate on an empty split");
  EvalResult out;
  double loss_sum = 0;
  for (const SegmentationSample& s : set) {
    int h = s.mask.h, w = s.mask.w;
    Tensor img(Shape{1, 3, h, w}, s.image.data);
    Graph g;
    Var x = g.leaf(img);
    Var logits = model.forward(g, x, false);
    Var l = segmentation_loss(g, logits, s.mask, loss, float(gamma), class_weights);
    loss_sum += double(g.val(l).data[0]);
    out.cm.accumulate(argmax_channels(g.val(logits)), s.mask);
  }
  out.mean_loss = loss_sum / double(set.size());
  out.summary = summarize(out.cm);
  return out;
}

TrainResult train(const TrainConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  DatasetSplits splits = load_splits(cfg);
  check_config(!splits.train.empty(), "training split is empty");
  const std::vector<SegmentationSample>& val_set =
      splits.val.empty() ? splits.train : splits.val;
  std::vector<double> weights = train_class_weights(cfg, splits.train);

  std::string last_path = (fs::path(cfg.out_dir) / "last.ckpt").string();
  std::string best_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
  std::string csv_path = (fs::path(cfg.out_dir) / "curves.csv").string();

  int start_epoch = 0;
  double lr = cfg.lr_init;
  PlateauSchedule sched(cfg.patience);
  double best_val_miou = -1;

  Model model = [&] {
    if (cfg.resume.empty()) {
      ModelConfig mc{cfg.variant, cfg.base_channels, cfg.depth,
                     ClassMap::kNumClasses, cfg.modulated};
      return Model::build(mc, cfg.seed);
    }
    return Model::from_store(records_to_store(read_checkpoint(cfg.resume)));
  }();
  Adam adam(model.store());

  TrainResult result;
  if (!cfg.resume.empty()) {
    ParamStore rec = records_to_store(read_checkpoint(cfg.resume));
    adam.load_state(rec);
    start_epoch = int(rec.at("train.epoch").data[0]);
    lr = decode_f64(rec.at("train.lr"));
    sched.restore(decode_f64(rec.at("train.sched_best")),
                  int(rec.at("train.sched_stale").data[0]));
    best_val_miou = decode_f64(rec.at("train.best_val_miou"));
    for (const EpochRow& r : read_curves_csv(csv_path))
      if (r.epoch < start_epoch) result.rows.push_back(r);
  }

  auto train_extras = [&](int completed_epochs) {
    std::vector<TensorRecord> extra = adam.state_records();
    extra.push_back({"train.epoch", Tensor::scalar(float(completed_epochs))});
    extra.push_back({"train.lr", encode_f64(lr)});
    extra.push_back({"train.sched_best", encode_f64(sched.best())});
    extra.push_back({"train.sched_stale", Tensor::scalar(float(sched.stale()))});
    extra.push_back({"train.best_val_miou", encode_f64(best_val_miou)});
    return extra;
  };

  std::vector<size_t> order(splits.train.size());
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, 0xE0000000ull + uint64_t(epoch)));
    std::iota(order.begin(), order.end(), size_t(0));
    erng.shuffle(order);

    double loss_sum = 0;
    size_t seen = 0;
    for (size_t i0 = 0; i0 < order.size(); i0 += size_t(cfg.batch_size)) {
      size_t bsz = std::min(size_t(cfg.batch_size), order.size() - i0);
      Tensor images;
      ClassMask target;
      fill_batch(splits.train, order, i0, bsz, cfg.augment, &erng, &images, &target);
      Graph g;
      Var x = g.leaf(std::move(images));
      Var logits = model.forward(g, x, true);
      Var loss = segmentation_loss(g, logits, target, cfg.loss, float(cfg.gamma),
                                   weights);
      float lv = g.val(loss).data[0];
      if (!std::isfinite(lv))
        throw StateError("non-finite loss at epoch " + std::to_string(epoch) +
                         "; last checkpoint preserved at " + last_path);
      g.backward(loss);
      adam.step(lr);
      loss_sum += double(lv) * double(bsz);
      seen += bsz;
    }

    EvalResult ev = evaluate_model(model, val_set, cfg.loss, cfg.gamma, weights);
    EpochRow row{epoch, loss_sum / double(seen), ev.mean_loss,
                 ev.summary.macro_miou};
    result.rows.push_back(row);
    lr = sched.update(row.val_miou, lr);
    write_curves_csv(csv_path, result.rows);

    bool is_best = row.val_miou > best_val_miou;
    if (is_best) best_val_miou = row.val_miou;
    save_store(last_path, model.store(), train_extras(epoch + 1));
    if (is_best) save_store(best_path, model.store(), train_extras(epoch + 1));
  }

  result.best_checkpoint = best_path;
  result.last_checkpoint = last_path;
  result.curves_csv = csv_path;
  result.best_val_miou = best_val_miou;

  // Final scoreboard: the best checkpoint judged on the test split (or the
  // validation set when the split holds no test samples).
  const std::vector<SegmentationSample>& report_set =
      !splits.test.empty() ? splits.test : val_set;
  Model best = Model::from_store(records_to_store(read_checkpoint(best_path)));
  EvalResult test_ev = evaluate_model(best, report_set, cfg.loss, cfg.gamma, weights);
  RunMetrics run{variant_label(cfg.variant) + "_" + loss_token(cfg.loss),
                 test_ev.summary};
  write_summary_csv((fs::path(cfg.out_dir) / "summary.csv").string(), run);
  {
    std::ofstream os(fs::path(cfg.out_dir) / "report.md");
    os << table_markdown({run});
    std::ofstream oc(fs::path(cfg.out_dir) / "report.csv");
    oc << table_csv({run});
    std::vector<double> tl, vl, vm;
    for (const EpochRow& r : result.rows) {
      tl.push_back(r.train_loss);
      vl.push_back(r.val_loss);
      vm.push_back(r.val_miou);
    }
    std::ofstream og(fs::path(cfg.out_dir) / "curves.svg");
    og << curves_svg(tl, vl, vm);
  }
  return result;
}

}  // namespace dseg
