#pragma once

#include <string>
#include <vector>

#include "medmap/checkpoint.hpp"
#include "medmap/csa_fusion.hpp"
#include "medmap/dataset.hpp"
#include "medmap/metrics.hpp"
#include "medmap/objectives.hpp"

namespace medmap {

// Serialized name of a KL direction ("forward"/"reverse") and its inverse.
std::string kl_direction_name(KlDirection d);
KlDirection kl_direction_from_name(const std::string& s);

struct FinetuneConfig {
    int epochs = 40;
    real learning_rate = 3e-4;  // desk default; the paper preset uses 1e-5
    int batch_size = 8;
    real weight_decay = 0.01;
    real kl_temperature = 1.0;
    std::uint64_t seed = 0;
    AblationFlags flags;
    KlDirection kl_direction = KlDirection::forward;
    int eval_every = 1;  // validation cadence in epochs; the last epoch always evaluates
};

struct EpochRecord {
    int epoch = 0;
    real loss = 0.0;  // mean ramped objective over batches
    real bce = 0.0;   // mean unweighted classification loss (tracked for sanity checks)
    real val_accuracy = 0.0;
    real val_macro_auc = 0.0;
    bool evaluated = false;  // val_* fields valid only when set
};

struct FinetuneResult {
    ModelCheckpoint checkpoint;
    std::vector<EpochRecord> history;
    MetricsReport final_metrics;
    std::string final_split;  // "val", or "train" when the manifest has no val records
    std::string text_checksum_before;
    std::string text_checksum_after;
};

// Index of the single active class in a record's multi-hot label vector.
// Throws unless exactly one bit is set (argmax evaluation is single-label).
int label_index(const VolumeRecord& record);

// Builds the fine-tuning model for a manifest: one conv/pool bank per
// manifest modality, shared transformer/fusion/head. With use_pretrained the
// expert bank (required non-null) seeds the conv banks.
CsaModel build_model(const DatasetManifest& manifest, ModalityExpertBank* bank, const FinetuneConfig& config);

// Fine-tunes per the config: decoupled-weight-decay Adam on the ramped
// objective (BCE alone for text-free variants), frozen text encoder verified
// by checksum every epoch, per-epoch validation metrics, NaN abort.
FinetuneResult finetune(const DatasetManifest& manifest, ModalityExpertBank* bank, const TextEncoder& text,
                        const FinetuneConfig& config);

// Deterministic forward passes over records -> argmax accuracy + macro AUC.
MetricsReport evaluate_model(CsaModel& model, const std::vector<VolumeRecord>& records, const TextEncoder& text);
MetricsReport evaluate(const DatasetManifest& manifest, CsaModel& model, const TextEncoder& text,
                       const std::string& split);

// Rebuilds the model a fine-tune checkpoint describes and restores every
// component's parameters.
CsaModel model_from_checkpoint(const ModelCheckpoint& ckpt);

// History CSV: "epoch,loss,val_acc,val_auc" (nan for epochs without eval).
void write_history(const std::string& path, const std::vector<EpochRecord>& history);

struct AblationRow {
    std::string name;
    AblationFlags flags;
    std::vector<real> accuracies;  // test accuracy per seed
    real mean_acc = 0.0;
    real std_acc = 0.0;  // sample standard deviation
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<std::uint64_t> seeds;
};

// Table-2-style component grid: Baseline (conv+head, random init, BCE only),
// +MAVLP (pretrained init), +CCT (adds transformer stream + fusion), +CSA
// (full model with text modulation and KL). Each row fine-tunes once per seed
// and reports test accuracy.
AblationTable ablate(const DatasetManifest& manifest, ModalityExpertBank& bank, const TextEncoder& text,
                     const FinetuneConfig& base, const std::vector<std::uint64_t>& seeds);

// Ablation CSV: "row,mean_acc,std_acc,seeds".
void write_ablation(const std::string& path, const AblationTable& table);

}  // namespace medmap
