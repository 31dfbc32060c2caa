#include "sapbench/harness.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <string>

#include "sapbench/checkpoint.hpp"
#include "sapbench/metrics.hpp"
#include "sapbench/parallel.hpp"
#include "sapbench/textio.hpp"

namespace sap {
namespace {

using nlohmann::json;

std::string now_utc() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open '" + p.string() + "'");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
}

// Inventory = every file under out except the manifest itself, path-sorted so
// reruns list files in one order.
void write_run_manifest(const std::filesystem::path& out, const std::string& command, const ExperimentConfig& cfg,
                        const std::string& started) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(out))
        if (entry.is_regular_file()) files.push_back(std::filesystem::relative(entry.path(), out));
    std::sort(files.begin(), files.end());

    json m;
    m["command"] = command;
    m["config"] = cfg.raw;
    m["seed"] = cfg.seed;
    m["versions"] = {{"sapbench", kToolVersion}, {"sapt_format", 1}, {"checkpoint_format", 1}};
    m["started"] = started;
    m["finished"] = now_utc();
    json inventory = json::array();
    for (const auto& rel : files) {
        if (rel == "manifest.json") continue;
        const std::string bytes = read_file_bytes(out / rel);
        inventory.push_back(
            {{"path", rel.generic_string()}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}});
    }
    m["files"] = inventory;
    write_text_file_atomic(out / "manifest.json", m.dump(2) + "\n");
}

template <typename F>
void with_precision(const std::string& precision, F&& f) {
    if (precision == "f32")
        f(float{});
    else
        f(double{});
}

template <typename T>
void check_data_model(const ModelGraph<T>& model, const Dataset<T>& data) {
    if (data.class_count != model.class_count)
        throw ConfigError("dataset has " + std::to_string(data.class_count) + " classes, model expects " +
                          std::to_string(model.class_count));
    const Shape& s = data.images.shape();
    const Shape per_example(s.begin() + 1, s.end());
    if (per_example != model.input_shape)
        throw ConfigError("example shape " + shape_str(per_example) + " does not match model input " +
                          shape_str(model.input_shape));
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// One sweep cell: a concrete attack instance plus its CSV label. The label
// carries a "-mc" suffix for defended-source attacks so grids that pair
// dense-source and defended-source variants of one attack stay distinct.
struct GridCell {
    std::size_t attack_index = 0;
    AttackSpec spec;
    std::string attack_label;
};

bool sweeps_mc(const AttackSpec& s) {
    return s.gradient_from_defended && (s.kind == AttackKind::Fgsm || s.kind == AttackKind::Iterative);
}

std::vector<GridCell> grid_cells(const ExperimentConfig& cfg) {
    std::vector<AttackSpec> attacks = cfg.attacks;
    if (attacks.empty()) attacks.push_back(AttackSpec{});  // clean accuracy only
    std::vector<GridCell> cells;
    for (std::size_t j = 0; j < attacks.size(); ++j) {
        const AttackSpec& base = attacks[j];
        const bool swept_lambda = base.kind != AttackKind::None;
        const bool swept_mc = sweeps_mc(base);
        const std::vector<double> lambdas = swept_lambda ? cfg.eval.lambdas : std::vector<double>{0.0};
        const std::vector<std::size_t> mcs = swept_mc ? cfg.eval.mc_samples : std::vector<std::size_t>{1};
        for (double lambda : lambdas)
            for (std::size_t mc : mcs) {
                GridCell cell;
                cell.attack_index = j;
                cell.spec = base;
                cell.spec.lambda = lambda;
                cell.spec.mc_samples = swept_mc ? mc : 1;
                if (swept_mc) cell.spec.mc_per_step = mc;
                // a step wider than the ball collapses to one full-size step
                if (cell.spec.kind == AttackKind::Iterative && lambda > 0.0 && cell.spec.step > lambda)
                    cell.spec.step = lambda;
                cell.attack_label = attack_kind_name(base.kind) + (swept_mc ? "-mc" : "");
                cells.push_back(cell);
            }
    }
    return cells;
}

// Seeds one cell's stream from its content, not its grid position: adding or
// reordering cells never moves another cell's randomness, and attack-export
// re-derives exactly what run_eval attacked.
std::string cell_key(const std::string& defense, const GridCell& c, std::size_t n_passes) {
    return defense + "|" + c.attack_label + "|" + format_real(c.spec.lambda) + "|" +
           std::to_string(c.spec.mc_samples) + "|" + std::to_string(n_passes);
}

std::string cell_file_tag(const GridCell& c) {
    std::string tag = "a" + std::to_string(c.attack_index) + "_" + c.attack_label + "_lambda" +
                      format_real(c.spec.lambda);
    if (sweeps_mc(c.spec)) tag += "_mc" + std::to_string(c.spec.mc_samples);
    return tag;
}

void check_unique_cells(const std::vector<GridCell>& cells, std::size_t n_passes) {
    std::set<std::string> seen;
    for (const GridCell& c : cells) {
        const std::string key = cell_key("", c, n_passes);
        if (!seen.insert(key).second)
            throw ConfigError("attack: two entries land on the same sweep cell (" + c.attack_label + ", lambda " +
                              format_real(c.spec.lambda) + ", mc " + std::to_string(c.spec.mc_samples) +
                              "); drop one or change its parameters");
    }
}

template <typename T>
void run_train_t(const ExperimentConfig& cfg, const std::filesystem::path& out) {
    const std::string started = now_utc();
    ModelGraph<T> model = build_model<T>(require_section(cfg.model, "model"));
    Dataset<T> data = resolve_dataset<T>(require_section(cfg.data, "data"), cfg.seed);
    const TrainConfig& tc = require_section(cfg.train, "train");
    check_data_model(model, data);

    RngStream root(cfg.seed);
    RngStream init_rs = root.fork(0, rng_tag::init);
    init_params(model, init_rs);

    ParamMap<T> velocity;
    History hist = tc.adv ? adversarial_train(model, data, tc, root, &velocity)
                          : train(model, data, tc, root, &velocity);

    std::filesystem::create_directories(out);
    Checkpoint<T> ck;
    ck.model = std::move(model);
    ck.velocity = std::move(velocity);
    ck.seed = cfg.seed;
    ck.epoch = tc.epochs;
    if (!hist.empty()) {
        ck.loss = hist.back().loss;
        ck.accuracy = hist.back().accuracy;
    }
    save_checkpoint(out / "checkpoint", ck);
    write_text_file_atomic(out / "history.csv", history_csv(hist));
    write_run_manifest(out, "train", cfg, started);
}

template <typename T>
void run_eval_t(const ExperimentConfig& cfg, const std::filesystem::path& model_dir, const std::filesystem::path& out,
                unsigned threads) {
    const std::string started = now_utc();
    Checkpoint<T> ck = load_checkpoint<T>(model_dir);
    Dataset<T> data = resolve_dataset<T>(require_section(cfg.data, "data"), cfg.seed);
    check_data_model(ck.model, data);
    if (cfg.model) {
        ModelGraph<T> declared = build_model<T>(*cfg.model);
        if (declared.layers.size() != ck.model.layers.size() || declared.input_shape != ck.model.input_shape ||
            declared.class_count != ck.model.class_count)
            throw ConfigError("model: section does not match the checkpoint at '" + model_dir.string() + "'");
    }

    auto policy = make_policy<T>(cfg.defense);
    const std::vector<GridCell> cells = grid_cells(cfg);
    check_unique_cells(cells, cfg.eval.n_passes);

    std::filesystem::create_directories(out);
    if (cfg.eval.calibration) std::filesystem::create_directories(out / "calib");

    std::vector<SweepRow> rows;
    for (const GridCell& cell : cells) {
        RngStream cell_rs = RngStream(cfg.seed).fork(fnv1a64(cell_key(policy->name(), cell, cfg.eval.n_passes)),
                                                     rng_tag::defense_eval);
        EvalOutput<T> res = evaluate(ck.model, *policy, cell.spec, data, cfg.eval.n_passes, cell_rs, threads);
        res.row.attack = cell.attack_label;
        res.row.seed = cfg.seed;
        rows.push_back(res.row);
        if (cfg.eval.calibration) {
            CalibrationRecord rec =
                calibrate<T>(res.confidences, res.correct, cfg.eval.calibration_bins);
            write_text_file_atomic(out / "calib" / (policy->name() + "_" + cell_file_tag(cell) + ".csv"),
                                   calibration_csv(rec));
        }
    }
    write_text_file_atomic(out / "sweep.csv", sweep_csv(rows));
    write_run_manifest(out, "eval", cfg, started);
}

template <typename T>
void run_attack_export_t(const ExperimentConfig& cfg, const std::filesystem::path& model_dir,
                         const std::filesystem::path& out) {
    const std::string started = now_utc();
    Checkpoint<T> ck = load_checkpoint<T>(model_dir);
    Dataset<T> data = resolve_dataset<T>(require_section(cfg.data, "data"), cfg.seed);
    check_data_model(ck.model, data);
    if (cfg.attacks.empty()) throw ConfigError("attack: at least one attack entry is required by this command");

    auto policy = make_policy<T>(cfg.defense);
    const std::vector<GridCell> cells = grid_cells(cfg);
    check_unique_cells(cells, cfg.eval.n_passes);

    std::filesystem::create_directories(out);
    write_tensor(out / "x.sapt", data.images);
    write_labels(out / "labels.sapt", data.labels);

    const std::size_t n = data.size();
    const std::size_t stride = shape_numel(ck.model.input_shape);
    for (const GridCell& cell : cells) {
        RngStream cell_rs = RngStream(cfg.seed).fork(fnv1a64(cell_key(policy->name(), cell, cfg.eval.n_passes)),
                                                     rng_tag::defense_eval);
        Tensor<T> xadv(data.images.shape());
        auto dst = xadv.data();
        for (std::size_t i = 0; i < n; ++i) {
            RngStream example_rs = cell_rs.fork(i);
            RngStream attack_rs = example_rs.fork(0, rng_tag::attack);
            const std::size_t idx[1] = {i};
            Tensor<T> x = detail::gather_rows(data.images, ck.model.input_shape, idx);
            const std::uint32_t label = data.labels[i];
            Tensor<T> adv = craft_attack<T>(ck.model, policy.get(), cell.spec, x,
                                            std::span<const std::uint32_t>(&label, 1), {}, attack_rs);
            auto src = adv.data();
            std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * stride));
        }
        write_tensor(out / ("x_adv_" + cell_file_tag(cell) + ".sapt"), xadv);
    }
    write_run_manifest(out, "attack-export", cfg, started);
}

template <typename T>
std::vector<std::string> run_verify_t(const ExperimentConfig* cfg, const std::filesystem::path& model_dir) {
    std::vector<std::string> lines;
    Checkpoint<T> ck = load_checkpoint<T>(model_dir);
    lines.push_back("ok: checkpoint manifest and parameter files are consistent");

    Shape probe_shape{2};
    for (std::size_t d : ck.model.input_shape) probe_shape.push_back(d);
    Tensor<T> probe(probe_shape);
    Tensor<T> logits = forward(ck.model, probe);
    if (!all_finite(logits)) throw NumericError("verify: dense forward on a zero probe produced non-finite logits");
    lines.push_back("ok: dense forward on a zero probe is finite");

    Tensor<T> probs = softmax(logits);
    auto pd = probs.data();
    for (std::size_t r = 0; r < 2; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < ck.model.class_count; ++c) sum += static_cast<double>(pd[r * ck.model.class_count + c]);
        if (std::abs(sum - 1.0) > 1e-6) throw NumericError("verify: softmax row does not sum to 1");
    }
    lines.push_back("ok: softmax rows are normalized");

    Tensor<T> again = forward(ck.model, probe);
    auto a = logits.data();
    auto b = again.data();
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) throw InternalError("verify: dense forward is not deterministic");
    lines.push_back("ok: dense forward is deterministic");

    if (!ck.model.hooks.empty()) {
        auto sap = make_policy<T>(SapConfig{});
        RngStream rs(1);
        Tensor<T> avg = averaged_forward(ck.model, probe, *sap, 3, rs);
        if (!all_finite(avg)) throw NumericError("verify: defended multi-pass forward produced non-finite output");
        lines.push_back("ok: defended multi-pass forward is finite");
    }

    if (cfg && cfg->data) {
        Dataset<T> data = resolve_dataset<T>(*cfg->data, cfg->seed);
        check_data_model(ck.model, data);
        const std::size_t take = std::min<std::size_t>(32, data.size());
        std::vector<std::size_t> idx(take);
        for (std::size_t i = 0; i < take; ++i) idx[i] = i;
        Tensor<T> sample = detail::gather_rows(data.images, ck.model.input_shape, idx);
        if (!all_finite(forward(ck.model, sample)))
            throw NumericError("verify: dense forward on dataset examples produced non-finite logits");
        lines.push_back("ok: dataset is compatible with the checkpoint");
    }
    return lines;
}

std::string checkpoint_precision(const std::filesystem::path& model_dir) {
    const auto manifest_path = model_dir / "manifest.json";
    try {
        return json::parse(read_file_bytes(manifest_path)).at("precision").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
}

}  // namespace

void run_train(const ExperimentConfig& cfg, const std::filesystem::path& out) {
    with_precision(cfg.precision, [&](auto tag) { run_train_t<decltype(tag)>(cfg, out); });
}

void run_eval(const ExperimentConfig& cfg, const std::filesystem::path& model_dir, const std::filesystem::path& out,
              unsigned threads) {
    const unsigned t = threads ? threads : default_thread_count();
    with_precision(cfg.precision, [&](auto tag) { run_eval_t<decltype(tag)>(cfg, model_dir, out, t); });
}

void run_attack_export(const ExperimentConfig& cfg, const std::filesystem::path& model_dir,
                       const std::filesystem::path& out) {
    with_precision(cfg.precision, [&](auto tag) { run_attack_export_t<decltype(tag)>(cfg, model_dir, out); });
}

void run_dataset_synth(const ExperimentConfig& cfg, const std::filesystem::path& out) {
    const std::string started = now_utc();
    const DataSection& ds = require_section(cfg.data, "data");
    if (!ds.synth) throw ConfigError("data.synth: section is required by this command");
    with_precision(cfg.precision, [&](auto tag) {
        using T = decltype(tag);
        Dataset<T> data = resolve_dataset<T>(ds, cfg.seed);
        std::filesystem::create_directories(out);
        save_dataset(out, data);
    });
    write_run_manifest(out, "dataset-synth", cfg, started);
}

std::vector<std::string> run_verify(const ExperimentConfig* cfg, const std::filesystem::path& model_dir) {
    const std::string precision = checkpoint_precision(model_dir);
    if (precision == "f32") return run_verify_t<float>(cfg, model_dir);
    if (precision == "f64") return run_verify_t<double>(cfg, model_dir);
    throw FormatError("checkpoint precision '" + precision + "' is not recognized");
}

}  // namespace sap
