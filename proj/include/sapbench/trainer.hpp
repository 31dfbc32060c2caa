#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sapbench/attack.hpp"
#include "sapbench/dataio.hpp"
#include "sapbench/defense.hpp"
#include "sapbench/errors.hpp"
#include "sapbench/model.hpp"
#include "sapbench/rng.hpp"
#include "sapbench/textio.hpp"

namespace sap {

struct LrPoint {
    std::size_t epoch_start = 1;
    double lr = 0.01;
};

// Adversarially perturbed share of each minibatch, crafted against a frozen
// snapshot of the previous epoch's parameters (epoch 1 attacks the init).
struct AdvTrainConfig {
    double mix_fraction = 0.2;
    double lambda_train = 2.0;
    AttackKind kind = AttackKind::Fgsm;
    double step = 1.0;  // iterative step size, used only by kind=iterative
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::vector<LrPoint> lr_schedule{{1, 0.01}};
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::optional<double> dropout_rate;  // applied at hooks during training only
    std::optional<AdvTrainConfig> adv;

    void validate() const {
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (lr_schedule.empty()) throw ConfigError("train: lr_schedule must not be empty");
        if (lr_schedule.front().epoch_start != 1) throw ConfigError("train: lr_schedule must start at epoch 1");
        for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
            if (!(lr_schedule[i].lr > 0.0)) throw ConfigError("train: learning rates must be positive");
            if (i > 0 && lr_schedule[i].epoch_start <= lr_schedule[i - 1].epoch_start)
                throw ConfigError("train: lr_schedule epochs must be strictly increasing");
        }
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
        if (dropout_rate && (*dropout_rate < 0.0 || *dropout_rate >= 1.0))
            throw ConfigError("train: dropout_rate must be in [0, 1)");
        if (adv) {
            if (adv->mix_fraction < 0.0 || adv->mix_fraction > 1.0)
                throw ConfigError("train: adv mix_fraction must be in [0, 1]");
            if (adv->lambda_train < 0.0) throw ConfigError("train: adv lambda must be non-negative");
            if (adv->kind == AttackKind::Iterative) {
                if (adv->step <= 0.0) throw ConfigError("train: adv step must be positive");
                if (adv->lambda_train > 0.0 && adv->step > adv->lambda_train)
                    throw ConfigError("train: adv step must not exceed lambda");
            }
        }
    }
};

inline double lr_at(const std::vector<LrPoint>& schedule, std::size_t epoch) {
    double lr = schedule.front().lr;
    for (const LrPoint& p : schedule)
        if (p.epoch_start <= epoch) lr = p.lr;
    return lr;
}

struct EpochStats {
    std::size_t epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    double lr = 0.0;
};

using History = std::vector<EpochStats>;

inline std::string history_csv(const History& history) {
    std::string out = "epoch,split,loss,accuracy\n";
    for (const EpochStats& row : history)
        out += std::to_string(row.epoch) + ",train," + format_real(row.loss) + "," + format_real(row.accuracy) + "\n";
    return out;
}

// v ← μ·v + g + wd·W;  W ← W − lr·v. Gradients are read from each parameter's
// grad buffer; missing velocity entries start at zero.
template <typename T>
void sgd_step(ParamMap<T>& params, ParamMap<T>& velocity, double lr, double momentum, double weight_decay) {
    for (auto& [name, w] : params) {
        auto vit = velocity.find(name);
        if (vit == velocity.end()) vit = velocity.emplace(name, Tensor<T>(w.shape())).first;
        else if (vit->second.shape() != w.shape())
            throw DimensionError("sgd_step: velocity " + name + " has shape " + shape_str(vit->second.shape()) +
                                 ", parameter has " + shape_str(w.shape()));
        auto wv = w.data();
        auto gv = w.grad();
        auto vv = vit->second.data();
        const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), eta = static_cast<T>(lr);
        for (std::size_t j = 0; j < wv.size(); ++j) {
            vv[j] = mu * vv[j] + gv[j] + wd * wv[j];
            wv[j] -= eta * vv[j];
        }
    }
}

// SGD over shuffled minibatches. All randomness forks off (root, epoch), so a
// run is bit-reproducible from the seed and resumable from any epoch boundary
// given the parameters and velocity. Returns one history row per epoch run.
//
// velocity_io, when given, carries optimizer state in and out (resume);
// start_epoch is how many epochs the incoming model has already completed.
template <typename T>
History train(ModelGraph<T>& model, const Dataset<T>& data, const TrainConfig& cfg, RngStream& root,
              ParamMap<T>* velocity_io = nullptr, std::size_t start_epoch = 0) {
    cfg.validate();
    validate_model(model);
    validate_dataset(data);
    if (data.size() == 0) throw DataError("train: empty dataset");
    if (data.class_count != model.class_count)
        throw ConfigError("train: dataset has " + std::to_string(data.class_count) + " classes, model expects " +
                          std::to_string(model.class_count));
    {
        const Shape& s = data.images.shape();
        const Shape per_example(s.begin() + 1, s.end());
        if (per_example != model.input_shape)
            throw ConfigError("train: example shape " + shape_str(per_example) + " does not match model input " +
                              shape_str(model.input_shape));
    }

    for (auto& [name, p] : model.params) p.set_requires_grad(true);
    ParamMap<T> local_velocity;
    ParamMap<T>& velocity = velocity_io ? *velocity_io : local_velocity;

    DropoutPolicy<T> dropout(DropoutConfig{cfg.dropout_rate.value_or(0.0)});
    const std::size_t n = data.size();
    const Shape per_example = model.input_shape;
    const std::size_t row = shape_numel(per_example);

    History history;
    for (std::size_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg.lr_schedule, epoch);

        // Previous epoch's parameters, frozen before this epoch touches them.
        ModelGraph<T> snapshot_model;
        const bool adv_active = cfg.adv && cfg.adv->mix_fraction > 0.0;
        if (adv_active) {
            snapshot_model = model;
            snapshot_model.params = clone_params(model.params);
        }

        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        RngStream shuffle_rs = root.fork(epoch, rng_tag::shuffle);
        for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[shuffle_rs.below(i + 1)]);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t batch = 0, start = 0; start < n; ++batch, start += cfg.batch_size) {
            const std::size_t bs = std::min(cfg.batch_size, n - start);
            const std::span<const std::size_t> idx(perm.data() + start, bs);
            Tensor<T> x = detail::gather_rows(data.images, per_example, idx);
            std::vector<std::uint32_t> y(bs);
            for (std::size_t i = 0; i < bs; ++i) y[i] = data.labels[idx[i]];

            if (adv_active) {
                const auto m = std::min<std::size_t>(
                    bs, static_cast<std::size_t>(std::llround(cfg.adv->mix_fraction * static_cast<double>(bs))));
                if (m > 0) {
                    std::vector<std::size_t> head(m);
                    for (std::size_t i = 0; i < m; ++i) head[i] = i;
                    Tensor<T> xm = detail::gather_rows(x, per_example, head);
                    const std::vector<std::uint32_t> ym(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(m));
                    AttackSpec spec;
                    spec.kind = cfg.adv->kind;
                    spec.lambda = cfg.adv->lambda_train;
                    spec.step = cfg.adv->step;
                    spec.mc_samples = 1;
                    spec.mc_per_step = 1;
                    RngStream adv_rs = root.fork(epoch, rng_tag::adv_train).fork(batch);
                    Tensor<T> xadv;
                    try {
                        xadv = craft_attack<T>(snapshot_model, nullptr, spec, xm, ym, {}, adv_rs);
                    } catch (const TrainingError&) {
                        throw;
                    } catch (const NumericError& e) {
                        throw TrainingError(std::string("adversarial crafting failed: ") + e.what(), epoch);
                    }
                    auto dst = x.data();
                    auto srcv = xadv.data();
                    for (std::size_t j = 0; j < m * row; ++j) dst[j] = srcv[j];
                }
            }

            ActivationTransform<T> transform;
            RngStream dropout_rs = root.fork(epoch, rng_tag::dropout_train).fork(batch);
            if (cfg.dropout_rate && *cfg.dropout_rate > 0.0)
                transform = [&](const Tensor<T>& h, std::size_t hook, Tape<T>* tape) {
                    return dropout.transform_activation(h, hook, tape, dropout_rs);
                };

            for (auto& [name, p] : model.params) p.zero_grad();
            Tape<T> tape;
            Tensor<T> logits = forward(model, x, transform, &tape);
            Tensor<T> loss = softmax_cross_entropy<T>(logits, y, &tape);
            const double batch_loss = static_cast<double>(loss.item());
            if (!std::isfinite(batch_loss)) throw TrainingError("training loss went non-finite", epoch);
            tape.backward(loss);
            sgd_step(model.params, velocity, lr, cfg.momentum, cfg.weight_decay);

            loss_sum += batch_loss * static_cast<double>(bs);
            Prediction<T> pred = predict(softmax(logits));
            for (std::size_t i = 0; i < bs; ++i) correct += pred.labels[i] == y[i];
        }
        history.push_back({epoch, loss_sum / static_cast<double>(n),
                           static_cast<double>(correct) / static_cast<double>(n), lr});
    }
    return history;
}

// train() with the adversarial mix required up front.
template <typename T>
History adversarial_train(ModelGraph<T>& model, const Dataset<T>& data, const TrainConfig& cfg, RngStream& root,
                          ParamMap<T>* velocity_io = nullptr, std::size_t start_epoch = 0) {
    if (!cfg.adv) throw ConfigError("adversarial_train: config has no adv section");
    return train(model, data, cfg, root, velocity_io, start_epoch);
}

}  // namespace sap
