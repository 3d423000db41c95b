#include "vicregl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vicregl/autodiff.hpp"
#include "vicregl/rng.hpp"

namespace vicregl {

std::vector<double> per_class_iou(const std::vector<std::vector<std::uint8_t>>& pred,
                                  const std::vector<std::vector<std::uint8_t>>& gt,
                                  std::size_t num_classes) {
  VRL_CHECK_ARG(pred.size() == gt.size(), "miou: mask count mismatch");
  std::vector<std::size_t> inter(num_classes, 0), uni(num_classes, 0);
  for (std::size_t s = 0; s < pred.size(); ++s) {
    VRL_CHECK_ARG(pred[s].size() == gt[s].size(), "miou: mask ", s, " size mismatch");
    for (std::size_t i = 0; i < pred[s].size(); ++i) {
      const std::uint8_t p = pred[s][i], g = gt[s][i];
      if (p == g) {
        ++inter[p];
        ++uni[p];
      } else {
        ++uni[p];
        ++uni[g];
      }
    }
  }
  std::vector<double> iou(num_classes, -1.0);
  for (std::size_t c = 0; c < num_classes; ++c)
    if (uni[c] > 0) iou[c] = double(inter[c]) / double(uni[c]);
  return iou;
}

double miou(const std::vector<std::vector<std::uint8_t>>& pred,
            const std::vector<std::vector<std::uint8_t>>& gt,
            std::size_t num_classes) {
  const auto iou = per_class_iou(pred, gt, num_classes);
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : iou)
    if (v >= 0.0) {
      sum += v;
      ++n;
    }
  return n == 0 ? 0.0 : sum / double(n);
}

namespace {

struct Split {
  std::vector<std::size_t> train, test;
};

Split make_split(std::size_t n, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed ^ 0x51ed27d1b0b4ull);
  rng.shuffle(idx.begin(), idx.end());
  const std::size_t n_train = std::size_t(double(n) * train_fraction);
  VRL_CHECK_ARG(n_train >= 1 && n_train < n, "probe split needs both partitions");
  Split s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.test.assign(idx.begin() + n_train, idx.end());
  return s;
}

Tensor gather_feature_rows(const Tensor& features, const std::vector<std::size_t>& idx) {
  const std::size_t c = features.dim(1);
  Tensor out({idx.size(), c});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(features.data() + idx[r] * c, features.data() + (idx[r] + 1) * c,
              out.data() + r * c);
  return out;
}

}  // namespace

ProbeResult train_linear_classifier(const Tensor& features,
                                    const std::vector<int>& labels,
                                    std::size_t num_classes, const ProbeConfig& cfg) {
  VRL_CHECK_ARG(features.rank() == 2 && features.dim(0) == labels.size(),
                "train_linear_classifier: features/labels mismatch");
  for (int l : labels)
    VRL_CHECK_ARG(l >= 0 && std::size_t(l) < num_classes,
                  "label ", l, " outside class count ", num_classes);
  const std::size_t n = features.dim(0), c = features.dim(1);
  const Split split = make_split(n, cfg.train_fraction, cfg.seed);

  ProbeResult best;
  best.metric = "top1_accuracy";
  best.value = -1.0;
  for (double lr : cfg.lr_sweep) {
    ad::Var w = ad::leaf(Tensor({num_classes, c}));
    ad::Var b = ad::leaf(Tensor({num_classes}));
    Tensor mw({num_classes, c}), mb({num_classes});
    Rng order_rng(cfg.seed * 0x2545f4914f6cdd1dull + 17);
    std::vector<std::size_t> train = split.train;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      order_rng.shuffle(train.begin(), train.end());
      for (std::size_t off = 0; off + 1 < train.size() + cfg.batch_size;
           off += cfg.batch_size) {
        const std::size_t end = std::min(off + cfg.batch_size, train.size());
        if (off >= end) break;
        std::vector<std::size_t> batch(train.begin() + off, train.begin() + end);
        std::vector<int> y;
        for (auto i : batch) y.push_back(labels[i]);
        ad::Var x = ad::constant(gather_feature_rows(features, batch));
        ad::Var loss = ad::cross_entropy_rows(ad::linear(x, w, b), y);
        ad::backward(loss);
        for (std::size_t k = 0; k < mw.numel(); ++k) {
          mw[k] = cfg.momentum * mw[k] + w.grad()[k];
          w.mutable_value()[k] -= lr * mw[k];
        }
        for (std::size_t k = 0; k < mb.numel(); ++k) {
          mb[k] = cfg.momentum * mb[k] + b.grad()[k];
          b.mutable_value()[k] -= lr * mb[k];
        }
      }
    }

    // held-out accuracy
    std::size_t correct = 0;
    std::vector<std::size_t> class_total(num_classes, 0), class_hit(num_classes, 0);
    for (auto i : split.test) {
      const double* f = features.data() + i * c;
      int arg = 0;
      double bestv = -1e300;
      for (std::size_t k = 0; k < num_classes; ++k) {
        double v = b.value()[k];
        for (std::size_t j = 0; j < c; ++j) v += w.value()[k * c + j] * f[j];
        if (v > bestv) {
          bestv = v;
          arg = int(k);
        }
      }
      ++class_total[labels[i]];
      if (arg == labels[i]) {
        ++correct;
        ++class_hit[labels[i]];
      }
    }
    const double acc = double(correct) / double(split.test.size());
    if (acc > best.value) {
      best.value = acc;
      best.best_lr = lr;
      best.per_class.assign(num_classes, -1.0);
      for (std::size_t k = 0; k < num_classes; ++k)
        if (class_total[k] > 0)
          best.per_class[k] = double(class_hit[k]) / double(class_total[k]);
    }
  }
  std::ostringstream snap;
  snap << "linear_cls epochs=" << cfg.epochs << " batch=" << cfg.batch_size
       << " seed=" << cfg.seed << " best_lr=" << best.best_lr;
  best.config_snapshot = snap.str();
  return best;
}

namespace {

Tensor featurize_pooled(VicreglModel& model, const Dataset& ds, std::size_t chunk) {
  const std::size_t n = ds.size();
  Tensor out;
  std::size_t c = 0;
  for (std::size_t off = 0; off < n; off += chunk) {
    const std::size_t end = std::min(off + chunk, n);
    const auto& first = ds.samples[off];
    Tensor batch({end - off, 3, first.height(), first.width()});
    for (std::size_t i = off; i < end; ++i)
      std::copy(ds.samples[i].pixels.data(),
                ds.samples[i].pixels.data() + ds.samples[i].pixels.numel(),
                batch.data() + (i - off) * ds.samples[i].pixels.numel());
    ad::Var pooled = VicreglModel::pool(model.encode(ad::constant(batch), false));
    if (c == 0) {
      c = pooled.value().dim(1);
      out = Tensor({n, c});
    }
    std::copy(pooled.value().data(), pooled.value().data() + pooled.value().numel(),
              out.data() + off * c);
  }
  return out;
}

// (N, C, h, w) stacked maps; with concat_stages every stage map is upsampled
// to the first stage's resolution and concatenated along channels.
Tensor featurize_maps(VicreglModel& model, const Dataset& ds, std::size_t chunk,
                      bool concat_stages) {
  const std::size_t n = ds.size();
  Tensor out;
  std::size_t C = 0, H = 0, W = 0;
  for (std::size_t off = 0; off < n; off += chunk) {
    const std::size_t end = std::min(off + chunk, n);
    const auto& first = ds.samples[off];
    Tensor batch({end - off, 3, first.height(), first.width()});
    for (std::size_t i = off; i < end; ++i)
      std::copy(ds.samples[i].pixels.data(),
                ds.samples[i].pixels.data() + ds.samples[i].pixels.numel(),
                batch.data() + (i - off) * ds.samples[i].pixels.numel());
    auto stages = model.encode_stages(ad::constant(batch), false);
    ad::Var maps;
    if (!concat_stages) {
      maps = stages.back();
    } else {
      const std::size_t h0 = stages.front().value().dim(2);
      const std::size_t w0 = stages.front().value().dim(3);
      std::vector<ad::Var> up;
      for (auto& s : stages)
        up.push_back(s.value().dim(2) == h0 ? s : ad::upsample_bilinear(s, h0, w0));
      maps = ad::concat_channels(up);
    }
    if (C == 0) {
      C = maps.value().dim(1);
      H = maps.value().dim(2);
      W = maps.value().dim(3);
      out = Tensor({n, C, H, W});
    }
    std::copy(maps.value().data(), maps.value().data() + maps.value().numel(),
              out.data() + off * C * H * W);
  }
  return out;
}

}  // namespace

ProbeResult linear_probe_classify(VicreglModel& model, const Dataset& dataset,
                                  const ProbeConfig& cfg) {
  VRL_CHECK_ARG(dataset.has_labels, "classification probe needs labels");
  std::size_t max_label = 0;
  std::vector<int> labels;
  for (const auto& s : dataset.samples) {
    labels.push_back(s.label);
    max_label = std::max<std::size_t>(max_label, std::size_t(s.label));
  }
  VRL_CHECK_ARG(dataset.class_count > max_label,
                "dataset class count ", dataset.class_count,
                " inconsistent with max label ", max_label);
  const std::uint64_t before = model.state_hash();
  Tensor features = featurize_pooled(model, dataset, cfg.feature_batch);
  // labels start at 1 (0 is background); remap to 0-based classes
  std::vector<int> y;
  for (int l : labels) y.push_back(l - 1);
  ProbeResult res =
      train_linear_classifier(features, y, dataset.class_count - 1, cfg);
  VRL_CHECK(model.state_hash() == before,
            "classification probe modified the backbone");
  return res;
}

ProbeResult linear_probe_segment(VicreglModel& model, const Dataset& dataset,
                                 const ProbeConfig& cfg) {
  VRL_CHECK_ARG(dataset.has_masks, "segmentation probe needs masks");
  const std::size_t K = dataset.class_count;
  const std::size_t res = dataset.samples.front().height();
  const std::uint64_t before = model.state_hash();

  Tensor maps = featurize_maps(model, dataset, cfg.feature_batch, cfg.concat_stages);
  const std::size_t C = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  const Split split = make_split(dataset.size(), cfg.train_fraction, cfg.seed);

  auto slice_maps = [&](const std::vector<std::size_t>& idx) {
    Tensor out({idx.size(), C, h, w});
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy(maps.data() + idx[r] * C * h * w, maps.data() + (idx[r] + 1) * C * h * w,
                out.data() + r * C * h * w);
    return out;
  };

  ProbeResult best;
  best.metric = "miou";
  best.value = -1.0;
  for (double lr : cfg.lr_sweep) {
    ad::Var wvar = ad::leaf(Tensor({K, C}));
    ad::Var bvar = ad::leaf(Tensor({K}));
    Tensor mw({K, C}), mb({K});
    Rng order_rng(cfg.seed * 0x9e3779b97f4a7c15ull + 29);
    std::vector<std::size_t> train = split.train;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      order_rng.shuffle(train.begin(), train.end());
      for (std::size_t off = 0; off < train.size(); off += cfg.seg_batch_size) {
        const std::size_t end = std::min(off + cfg.seg_batch_size, train.size());
        std::vector<std::size_t> batch(train.begin() + off, train.begin() + end);
        ad::Var x = ad::constant(slice_maps(batch));
        // per-position linear layer, upsampled logits, per-pixel CE
        ad::Var rows = ad::rows_from_map(x);
        ad::Var logits_map =
            ad::map_from_rows(ad::linear(rows, wvar, bvar), batch.size(), h, w);
        ad::Var up = ad::upsample_bilinear(logits_map, res, res);
        std::vector<int> y;
        y.reserve(batch.size() * res * res);
        for (auto i : batch)
          for (std::size_t p = 0; p < res * res; ++p)
            y.push_back(int(dataset.samples[i].mask[p]));
        ad::Var loss = ad::cross_entropy_rows(ad::rows_from_map(up), y);
        ad::backward(loss);
        for (std::size_t k = 0; k < mw.numel(); ++k) {
          mw[k] = cfg.momentum * mw[k] + wvar.grad()[k];
          wvar.mutable_value()[k] -= lr * mw[k];
        }
        for (std::size_t k = 0; k < mb.numel(); ++k) {
          mb[k] = cfg.momentum * mb[k] + bvar.grad()[k];
          bvar.mutable_value()[k] -= lr * mb[k];
        }
      }
    }

    // predicted masks on the held-out split
    std::vector<std::vector<std::uint8_t>> pred, gt;
    for (std::size_t off = 0; off < split.test.size(); off += cfg.seg_batch_size) {
      const std::size_t end = std::min(off + cfg.seg_batch_size, split.test.size());
      std::vector<std::size_t> batch(split.test.begin() + off,
                                     split.test.begin() + end);
      ad::Var x = ad::constant(slice_maps(batch));
      ad::Var rows = ad::rows_from_map(x);
      ad::Var logits_map =
          ad::map_from_rows(ad::linear(rows, wvar, bvar), batch.size(), h, w);
      ad::Var up = ad::upsample_bilinear(logits_map, res, res);
      for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        std::vector<std::uint8_t> mask(res * res);
        for (std::size_t p = 0; p < res * res; ++p) {
          int arg = 0;
          double bestv = -1e300;
          for (std::size_t k = 0; k < K; ++k) {
            const double v = up.value()[(bi * K + k) * res * res + p];
            if (v > bestv) {
              bestv = v;
              arg = int(k);
            }
          }
          mask[p] = std::uint8_t(arg);
        }
        pred.push_back(std::move(mask));
        gt.push_back(dataset.samples[batch[bi]].mask);
      }
    }
    const double m = miou(pred, gt, K);
    if (m > best.value) {
      best.value = m;
      best.best_lr = lr;
      best.per_class = per_class_iou(pred, gt, K);
    }
  }
  VRL_CHECK(model.state_hash() == before, "segmentation probe modified the backbone");
  std::ostringstream snap;
  snap << "linear_seg epochs=" << cfg.epochs << " batch=" << cfg.seg_batch_size
       << " seed=" << cfg.seed << " concat_stages=" << cfg.concat_stages
       << " best_lr=" << best.best_lr;
  best.config_snapshot = snap.str();
  return best;
}

}  // namespace vicregl
