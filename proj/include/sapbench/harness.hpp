#pragma once

// Command back ends shared by the CLI and the acceptance tests. Each run
// leaves its outputs plus a manifest.json (config snapshot, timestamps, file
// inventory with content hashes) inside the chosen output directory; input
// files are never touched. Emitted CSVs and tensors are reproducible from
// (config, seed) alone - thread count only partitions work.

#include <filesystem>
#include <string>
#include <vector>

#include "sapbench/config.hpp"

namespace sap {

inline constexpr const char* kToolVersion = "0.1.0";

// Trains per the config's model/data/train sections; writes checkpoint/,
// history.csv, manifest.json under out.
void run_train(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Sweeps defense x attacks x lambdas x mc grid against a trained checkpoint;
// writes sweep.csv, calib/*.csv (when enabled), manifest.json under out.
void run_eval(const ExperimentConfig& cfg, const std::filesystem::path& model_dir, const std::filesystem::path& out,
              unsigned threads);

// Exports the evaluation inputs and each cell's crafted adversarial batches
// as tensor files. The per-example streams match run_eval's exactly, so the
// exported x_adv is byte-for-byte what the sweep attacked.
void run_attack_export(const ExperimentConfig& cfg, const std::filesystem::path& model_dir,
                       const std::filesystem::path& out);

// Materializes the config's synthetic dataset; writes images.sapt,
// labels.sapt, meta.json, manifest.json under out.
void run_dataset_synth(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Invariant suite against a saved checkpoint (precision read from its
// manifest): load consistency, finite forwards, softmax normalization,
// dense determinism, defended multi-pass sanity, and - when cfg provides a
// data section - dataset compatibility. Returns one line per passed check;
// throws on the first violation. Writes nothing.
std::vector<std::string> run_verify(const ExperimentConfig* cfg, const std::filesystem::path& model_dir);

}  // namespace sap
