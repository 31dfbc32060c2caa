#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "sapbench/attack.hpp"
#include "sapbench/dataio.hpp"
#include "sapbench/defense.hpp"
#include "sapbench/errors.hpp"
#include "sapbench/model.hpp"
#include "sapbench/parallel.hpp"
#include "sapbench/rng.hpp"
#include "sapbench/textio.hpp"

namespace sap {

// One cell of an accuracy-versus-λ sweep grid.
struct SweepRow {
    std::string defense;
    std::string attack;
    double lambda = 0.0;
    std::size_t mc_samples = 0;
    std::size_t n_passes = 0;
    double accuracy = 0.0;
    std::size_t n = 0;
    std::uint64_t seed = 0;
};

struct CalibrationBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;  // 0 flags an empty bin, excluded from the ECE
    double mean_conf = 0.0;
    double accuracy = 0.0;
};

struct CalibrationRecord {
    std::vector<CalibrationBin> bins;
    double ece = 0.0;
    std::size_t n = 0;
};

template <typename T>
struct EvalOutput {
    SweepRow row;
    std::vector<T> confidences;          // max averaged probability per example
    std::vector<std::uint32_t> predicted;
    std::vector<std::uint8_t> correct;
};

// Per-example: craft the perturbation, run the defended multi-pass forward,
// predict, compare. The adversary and the defender fork independent streams
// from each example's stream, so neither can perturb the other's draws, and
// every example is independent of the thread partition.
template <typename T>
EvalOutput<T> evaluate(const ModelGraph<T>& model, const DefensePolicy<T>& defense, const AttackSpec& attack,
                       const Dataset<T>& data, std::size_t n_passes, RngStream& rs, unsigned threads = 1) {
    validate_model(model);
    attack.validate();
    if (data.size() == 0) throw DataError("evaluate: empty dataset");
    if (data.class_count != model.class_count)
        throw ConfigError("evaluate: dataset has " + std::to_string(data.class_count) + " classes, model expects " +
                          std::to_string(model.class_count));
    {
        const Shape& s = data.images.shape();
        const Shape per_example(s.begin() + 1, s.end());
        if (per_example != model.input_shape)
            throw ConfigError("evaluate: example shape " + shape_str(per_example) + " does not match model input " +
                              shape_str(model.input_shape));
    }

    const std::size_t n = data.size();
    EvalOutput<T> out;
    out.confidences.resize(n);
    out.predicted.resize(n);
    out.correct.resize(n);

    parallel_for(n, threads, [&](std::size_t i) {
        RngStream example_rs = rs.fork(i);
        RngStream attack_rs = example_rs.fork(0, rng_tag::attack);
        RngStream defense_rs = example_rs.fork(1, rng_tag::defense_eval);
        const std::size_t idx[1] = {i};
        Tensor<T> x = detail::gather_rows(data.images, model.input_shape, idx);
        const std::uint32_t label = data.labels[i];
        Tensor<T> xadv = craft_attack<T>(model, &defense, attack, x, std::span<const std::uint32_t>(&label, 1), {},
                                         attack_rs);
        Tensor<T> probs = averaged_forward(model, xadv, defense, n_passes, defense_rs);
        Prediction<T> pred = predict(probs);
        out.confidences[i] = pred.confidences[0];
        out.predicted[i] = pred.labels[0];
        out.correct[i] = pred.labels[0] == label ? 1 : 0;
    });

    std::size_t correct_count = 0;
    for (std::uint8_t c : out.correct) correct_count += c;
    out.row.defense = defense.name();
    out.row.attack = attack_kind_name(attack.kind);
    out.row.lambda = attack.lambda;
    out.row.mc_samples = attack.mc_samples;
    out.row.n_passes = n_passes;
    out.row.accuracy = static_cast<double>(correct_count) / static_cast<double>(n);
    out.row.n = n;
    out.row.seed = rs.key();
    return out;
}

// B equal-width bins over (0,1]; bin b covers ((b-1)/B, b/B]. Within-bin sums
// run over sorted confidences so the record is invariant to example order.
// ECE = Σ_occupied (count/n)·|accuracy − mean confidence|.
template <typename T>
CalibrationRecord calibrate(std::span<const T> confidences, std::span<const std::uint8_t> correct, std::size_t bins) {
    if (bins == 0) throw InputError("calibrate: bin count must be positive");
    if (confidences.size() != correct.size())
        throw InputError("calibrate: " + std::to_string(confidences.size()) + " confidences but " +
                         std::to_string(correct.size()) + " outcomes");

    const auto b = static_cast<double>(bins);
    std::vector<std::vector<double>> bin_confs(bins);
    std::vector<std::size_t> bin_correct(bins, 0);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const double c = static_cast<double>(confidences[i]);
        if (!(c > 0.0 && c <= 1.0))
            throw InputError("calibrate: confidence " + format_real(c) + " at index " + std::to_string(i) +
                             " outside (0, 1]");
        const auto idx = std::min<std::size_t>(bins - 1, static_cast<std::size_t>(std::ceil(c * b)) - 1);
        bin_confs[idx].push_back(c);
        bin_correct[idx] += correct[i] ? 1 : 0;
    }

    CalibrationRecord rec;
    rec.n = confidences.size();
    rec.bins.resize(bins);
    double ece = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
        CalibrationBin& bin = rec.bins[k];
        bin.lo = static_cast<double>(k) / b;
        bin.hi = static_cast<double>(k + 1) / b;
        bin.count = bin_confs[k].size();
        if (bin.count == 0) continue;
        std::sort(bin_confs[k].begin(), bin_confs[k].end());
        double sum = 0.0;
        for (double c : bin_confs[k]) sum += c;
        bin.mean_conf = sum / static_cast<double>(bin.count);
        bin.accuracy = static_cast<double>(bin_correct[k]) / static_cast<double>(bin.count);
        ece += (static_cast<double>(bin.count) / static_cast<double>(rec.n)) * std::abs(bin.accuracy - bin.mean_conf);
    }
    rec.ece = ece;
    return rec;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
    std::set<std::tuple<std::string, std::string, double, std::size_t, std::size_t>> keys;
    std::string out = "defense,attack,lambda,mc_samples,n_passes,accuracy,n,seed\n";
    for (const SweepRow& r : rows) {
        if (!(r.accuracy >= 0.0 && r.accuracy <= 1.0))
            throw InternalError("sweep row accuracy " + format_real(r.accuracy) + " outside [0,1]");
        if (!keys.emplace(r.defense, r.attack, r.lambda, r.mc_samples, r.n_passes).second)
            throw InternalError("duplicate sweep row for " + r.defense + "/" + r.attack + "/" +
                                format_real(r.lambda));
        out += r.defense + "," + r.attack + "," + format_real(r.lambda) + "," + std::to_string(r.mc_samples) + "," +
               std::to_string(r.n_passes) + "," + format_real(r.accuracy) + "," + std::to_string(r.n) + "," +
               std::to_string(r.seed) + "\n";
    }
    return out;
}

// Empty bins keep their row with blank statistics; the trailing line carries
// the scalar ECE.
inline std::string calibration_csv(const CalibrationRecord& rec) {
    std::string out = "bin_lo,bin_hi,count,mean_conf,accuracy\n";
    for (const CalibrationBin& bin : rec.bins) {
        out += format_real(bin.lo) + "," + format_real(bin.hi) + "," + std::to_string(bin.count) + ",";
        if (bin.count > 0)
            out += format_real(bin.mean_conf) + "," + format_real(bin.accuracy);
        else
            out += ",";
        out += "\n";
    }
    out += "ece," + format_real(rec.ece) + "\n";
    return out;
}

}  // namespace sap
