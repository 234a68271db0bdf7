// Training and evaluation loops. Gradients from a batch are reduced in
// instance order regardless of the worker count, so runs are reproducible
// for any DNE_THREADS setting.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dne/mesh.hpp"
#include "dne/parallel.hpp"
#include "dne/pipeline.hpp"
#include "dne/synthetic.hpp"

namespace dne {

struct EvalMetrics {
  double mpvpe3d = 0.0;
  double mpjpe3d = 0.0;
  double mpvpe2d = 0.0;
};

// The 2D metric compares the refined mesh reprojected by the refined camera
// against the true mesh under the true camera.
inline EvalMetrics evaluate_state(const RefinementState& state, const SyntheticInstance& inst) {
  EvalMetrics m;
  m.mpvpe3d = mpvpe(state.mesh, inst.gt_mesh);
  m.mpjpe3d = mpjpe(state.mesh, inst.gt_mesh);
  m.mpvpe2d = mpvpe_2d(project_all(state.mesh.vertices, state.camera),
                       project_all(inst.gt_mesh.vertices, inst.gt_camera));
  return m;
}

struct DatasetMetrics {
  EvalMetrics coarse;
  EvalMetrics refined;
};

inline DatasetMetrics evaluate_dataset(const DnePipelineParams& params,
                                       const std::vector<SyntheticInstance>& instances) {
  const int count = static_cast<int>(instances.size());
  std::vector<EvalMetrics> coarse(count), refined(count);
  parallel_for(count, [&](int i) {
    const RefinementState start = coarse_state(instances[i]);
    coarse[i] = evaluate_state(start, instances[i]);
    refined[i] = evaluate_state(refine(start, instances[i].grid, params), instances[i]);
  });
  DatasetMetrics out;
  for (int i = 0; i < count; ++i) {
    out.coarse.mpvpe3d += coarse[i].mpvpe3d;
    out.coarse.mpjpe3d += coarse[i].mpjpe3d;
    out.coarse.mpvpe2d += coarse[i].mpvpe2d;
    out.refined.mpvpe3d += refined[i].mpvpe3d;
    out.refined.mpjpe3d += refined[i].mpjpe3d;
    out.refined.mpvpe2d += refined[i].mpvpe2d;
  }
  if (count > 0) {
    const double inv = 1.0 / count;
    out.coarse.mpvpe3d *= inv;
    out.coarse.mpjpe3d *= inv;
    out.coarse.mpvpe2d *= inv;
    out.refined.mpvpe3d *= inv;
    out.refined.mpjpe3d *= inv;
    out.refined.mpvpe2d *= inv;
  }
  return out;
}

struct TrainLogRow {
  int epoch = 0;
  std::string split;       // "train" or "val"
  double loss = std::numeric_limits<double>::quiet_NaN();
  EvalMetrics metrics;
  bool has_metrics = false;
};

struct TrainResult {
  DnePipelineParams params;
  std::vector<TrainLogRow> log;
};

inline TrainResult train(const std::vector<SyntheticInstance>& train_set,
                         const std::vector<SyntheticInstance>& val_set,
                         const PipelineConfig& cfg, int epochs, std::uint64_t seed) {
  cfg.validate();
  if (cfg.modules < 1) throw std::invalid_argument("train: modules must be >= 1");
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const int n_vertices = train_set.front().gt_mesh.vertex_count();
  TrainResult result;
  result.params = init_pipeline(cfg, n_vertices, seed);
  const CounterRng rng(seed);
  const int train_count = static_cast<int>(train_set.size());
  const int batch = std::max(1, std::min(cfg.batch_size, train_count));
  const LrSchedule sched{cfg.lr, cfg.lr_decay, cfg.lr_step_epochs};
  // Gradient scale is decoupled from N/R/batch so one learning rate serves
  // every configuration.
  const double grad_norm =
      1.0 / (static_cast<double>(batch) * cfg.samples * n_vertices);

  std::vector<int> order(train_count);
  for (int i = 0; i < train_count; ++i) order[i] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    // Deterministic Fisher-Yates shuffle.
    for (int i = train_count - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.bits(0x5fu, epoch, i) % (i + 1));
      std::swap(order[i], order[j]);
    }
    const double lr = sched.at(epoch) * grad_norm;
    double epoch_loss = 0.0;
    for (int start = 0; start < train_count; start += batch) {
      const int bsize = std::min(batch, train_count - start);
      std::vector<std::unique_ptr<PipelineGrad>> slots(bsize);
      std::vector<double> losses(bsize, 0.0);
      parallel_for(bsize, [&](int b) {
        const SyntheticInstance& inst = train_set[order[start + b]];
        auto grad = std::make_unique<PipelineGrad>();
        grad->init_like(result.params);
        const std::uint64_t noise_seed = rng.bits(0x7au, epoch, order[start + b]);
        losses[b] = train_forward_backward(result.params, inst.grid, coarse_state(inst),
                                           inst.gt_mesh, inst.gt_camera, noise_seed, *grad);
        slots[b] = std::move(grad);
      });
      PipelineGrad& master = *slots[0];
      for (int b = 1; b < bsize; ++b) master.accumulate(*slots[b]);
      for (double l : losses) epoch_loss += l;
      apply_sgd(result.params, master, lr);
    }
    TrainLogRow train_row;
    train_row.epoch = epoch + 1;
    train_row.split = "train";
    train_row.loss = epoch_loss / train_count;
    result.log.push_back(train_row);

    if (!val_set.empty()) {
      const DatasetMetrics vm = evaluate_dataset(result.params, val_set);
      TrainLogRow val_row;
      val_row.epoch = epoch + 1;
      val_row.split = "val";
      val_row.metrics = vm.refined;
      val_row.has_metrics = true;
      result.log.push_back(val_row);
    }
  }
  return result;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  out << "epoch,loss,mpvpe3d,mpjpe3d,mpvpe2d,split\n";
  for (const TrainLogRow& r : rows) {
    out << r.epoch << ',';
    out << (std::isnan(r.loss) ? std::string() : format_double(r.loss)) << ',';
    if (r.has_metrics)
      out << format_double(r.metrics.mpvpe3d) << ',' << format_double(r.metrics.mpjpe3d) << ','
          << format_double(r.metrics.mpvpe2d);
    else
      out << ",,";
    out << ',' << r.split << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace dne
