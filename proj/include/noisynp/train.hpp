#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "noisynp/objectives.hpp"
#include "noisynp/optim.hpp"
#include "noisynp/tasks.hpp"

namespace noisynp {

struct TrainConfig {
  long steps = 100000;
  double lr = 5e-4;
  std::string lr_schedule = "cosine";  // "cosine" | "constant"
  std::uint64_t seed = 0;
  long log_every = 100;
  long checkpoint_every = 5000;
  double scale = 1.0;  // single desk-scale multiplier on the step budget

  long effective_steps() const {
    return std::max<long>(0, static_cast<long>(std::llround(
                                 static_cast<double>(steps) * scale)));
  }

  void validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
    if (lr_schedule != "cosine" && lr_schedule != "constant")
      throw ConfigError("unknown lr schedule: " + lr_schedule);
    if (scale <= 0) throw ConfigError("scale must be > 0");
  }
};

// One training run: owns the parameters, optimizer state and both RNG
// streams, so a checkpoint of these fields resumes bit-exactly.
template <class S>
class Trainer {
 public:
  Trainer(ModelVariant variant, ModelConfig model_cfg, TaskConfig task_cfg,
          Setup setup, LossConfig loss_cfg, TrainConfig train_cfg)
      : variant_(variant),
        model_cfg_(std::move(model_cfg)),
        task_cfg_(std::move(task_cfg)),
        setup_(setup),
        loss_cfg_(loss_cfg),
        train_cfg_(train_cfg) {
    train_cfg_.validate();
    loss_cfg_.validate();
    task_cfg_.validate();
    Rng init_rng(train_cfg_.seed);
    init_model(params_, variant_, model_cfg_, init_rng);
    data_rng_ = Rng(train_cfg_.seed * 0x9e3779b97f4a7c15ull + 1);
    model_rng_ = Rng(train_cfg_.seed * 0xbf58476d1ce4e5b9ull + 2);
  }

  // Standard training reconstructs context+target; the robust loss drops
  // the context unless the all-points ablation re-includes it.
  bool query_includes_ctx() const {
    return variant_.robust ? loss_cfg_.include_context_in_recon : true;
  }

  LossBreakdown step_once() {
    const TaskBatch task = make_task(task_cfg_, setup_, Phase::train, data_rng_);
    Tape<S> tape;
    BoundParams<S> bound(tape, params_);
    ModelOutput<S> out =
        forward(bound, variant_, model_cfg_, task, loss_cfg_.k_train,
                model_rng_, Phase::train, query_includes_ctx());
    TapedLoss<S> loss = training_loss(bound, variant_, out, task, loss_cfg_);
    if (!std::isfinite(loss.breakdown.total))
      throw NumericError("non-finite loss at step " + std::to_string(step_));
    params_.zero_grads();
    tape.backward(loss.total);
    bound.harvest_grads();
    opt_.step(params_, lr_at(step_));
    ++step_;
    return loss.breakdown;
  }

  // Runs to the configured step budget; on_step fires after every step
  // (logging), on_checkpoint at the checkpoint cadence and at the end.
  void run(const std::function<void(long, const LossBreakdown&)>& on_step = {},
           const std::function<void(long)>& on_checkpoint = {}) {
    const long total = train_cfg_.effective_steps();
    while (step_ < total) {
      const LossBreakdown lb = step_once();
      if (on_step) on_step(step_, lb);
      if (on_checkpoint && (step_ == total || (train_cfg_.checkpoint_every > 0 &&
                                               step_ % train_cfg_.checkpoint_every == 0)))
        on_checkpoint(step_);
    }
  }

  double lr_at(long step) const {
    if (train_cfg_.lr_schedule == "constant") return train_cfg_.lr;
    const double total =
        std::max<long>(1, train_cfg_.effective_steps());
    return train_cfg_.lr * 0.5 *
           (1.0 + std::cos(3.14159265358979323846 *
                           static_cast<double>(step) / total));
  }

  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  Adam<S>& optimizer() { return opt_; }
  long step() const { return step_; }
  void set_step(long s) { step_ = s; }
  Rng& data_rng() { return data_rng_; }
  Rng& model_rng() { return model_rng_; }
  ModelVariant variant() const { return variant_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TaskConfig& task_config() const { return task_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  const LossConfig& loss_config() const { return loss_cfg_; }
  Setup setup() const { return setup_; }

 private:
  ModelVariant variant_;
  ModelConfig model_cfg_;
  TaskConfig task_cfg_;
  Setup setup_;
  LossConfig loss_cfg_;
  TrainConfig train_cfg_;
  ParamStore<S> params_;
  Adam<S> opt_;
  Rng data_rng_, model_rng_;
  long step_ = 0;
};

}  // namespace noisynp
