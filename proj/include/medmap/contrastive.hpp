#pragma once

#include <string>
#include <vector>

#include "medmap/checkpoint.hpp"
#include "medmap/dataset.hpp"
#include "medmap/tape.hpp"
#include "medmap/text_encoding.hpp"
#include "medmap/vision_backbone.hpp"

namespace medmap {

struct PretrainConfig {
    int epochs = 12;
    real learning_rate = 1e-4;
    int batch_size = 16;
    real temperature = 0.07;  // fixed, not learned
    real weight_decay = 0.01;
    std::uint64_t seed = 0;
};

// S[i][j] = <fv_i, ft_j> / temperature. Both batches must be [N, E] with
// unit-norm rows; entries are cosines over temperature.
Tensor similarity_matrix(const Tensor& fv_batch, const Tensor& ft_batch, real temperature);

// Directional InfoNCE terms: mean over rows (volumes) / columns (reports) of
// -log softmax probability assigned to the matched diagonal entry.
real loss_v2t(const Tensor& S);
real loss_t2v(const Tensor& S);

// (loss_v2t + loss_t2v) / 2 on the similarity matrix of the two batches.
// Exactly symmetric under swapping the batch arguments.
real symmetric_loss(const Tensor& fv_batch, const Tensor& ft_batch, real temperature);

// Differentiable path used by the training loop; fv/ft are [N, E] nodes.
Tape::NodeId symmetric_loss_node(Tape& t, Tape::NodeId fv_batch, Tape::NodeId ft_batch, real temperature);

struct EpochLoss {
    int epoch;
    real loss;
};

struct PretrainResult {
    std::string modality;
    std::vector<EpochLoss> curve;
    std::string text_checksum_before;
    std::string text_checksum_after;
    ModelCheckpoint checkpoint;
};

// Trains the modality's expert encoder (conv stream + pooling head) against
// the frozen text encoder's normalized report embeddings, minimizing the
// symmetric contrastive loss over modality-pure mini-batches. The text
// encoder is never updated; its checksum is verified before and after.
PretrainResult pretrain_modality(const DatasetManifest& manifest, const std::string& modality,
                                 ModalityExpertBank& bank, const TextEncoder& text, const PretrainConfig& config);

// Loss curve CSV: header "epoch,loss", one row per epoch.
void write_loss_curve(const std::string& path, const std::vector<EpochLoss>& curve);

struct RetrievalResult {
    int correct = 0;
    int total = 0;
    real top1 = 0.0;    // correct / total
    real chance = 0.0;  // 1 / total
};

// Text -> volume top-1 retrieval over a mixed-modality candidate pool: each
// report embedding must pick out its own volume (encoded by the volume's own
// modality expert) by cosine similarity.
RetrievalResult text_to_volume_retrieval(const std::vector<VolumeRecord>& records, ModalityExpertBank& bank,
                                         const TextEncoder& text);

// Rebuilds an expert bank from per-modality pretraining checkpoints laid out
// as <dir>/expert_<modality>.ckpt (the convention the CLI writes).
ModalityExpertBank load_expert_bank(const std::string& dir, const std::vector<std::string>& modalities);

}  // namespace medmap
