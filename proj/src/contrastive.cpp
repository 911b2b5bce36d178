#include "medmap/contrastive.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "medmap/mathutil.hpp"
#include "medmap/volume.hpp"

namespace medmap {

namespace {

void check_batch(const Tensor& x, const char* which) {
    if (x.rank() != 2 || x.dim(0) < 1)
        throw ValidationError(std::string(which) + " batch must be [N,E] with N >= 1, got " + shape_str(x.shape()));
    for (int i = 0; i < x.dim(0); ++i) {
        real n2 = 0.0;
        for (int e = 0; e < x.dim(1); ++e) {
            real v = x[std::int64_t(i) * x.dim(1) + e];
            n2 += v * v;
        }
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-5)
            throw ValidationError(std::string(which) + " batch row " + std::to_string(i) + " is not unit-norm");
    }
}

// normalized text embedding for one report
Tensor normalized_text(const TextEncoder& text, const std::string& report) {
    Tensor e = text.encode(report);
    real n = e.l2_norm();
    if (n < 1e-12) throw NumericError("degenerate text embedding (zero norm)");
    for (std::int64_t i = 0; i < e.size(); ++i) e[i] /= n;
    return e;
}

}  // namespace

Tensor similarity_matrix(const Tensor& fv_batch, const Tensor& ft_batch, real temperature) {
    if (temperature <= 0.0) throw ValidationError("temperature must be positive");
    check_batch(fv_batch, "volume");
    check_batch(ft_batch, "text");
    if (!fv_batch.same_shape(ft_batch))
        throw ValidationError("batch shapes differ: " + shape_str(fv_batch.shape()) + " vs " +
                              shape_str(ft_batch.shape()));
    int n = fv_batch.dim(0), e = fv_batch.dim(1);
    Tensor s({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            real dot = 0.0;
            for (int k = 0; k < e; ++k) dot += fv_batch[std::int64_t(i) * e + k] * ft_batch[std::int64_t(j) * e + k];
            s[std::int64_t(i) * n + j] = dot / temperature;
        }
    if (!s.all_finite()) throw NumericError("similarity matrix is not finite");
    return s;
}

real loss_v2t(const Tensor& S) {
    if (S.rank() != 2 || S.dim(0) != S.dim(1)) throw ValidationError("similarity matrix must be square");
    if (!S.all_finite()) throw NumericError("similarity matrix is not finite");
    int n = S.dim(0);
    std::vector<real> row(n);
    real total = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) row[j] = S[std::int64_t(i) * n + j];
        log_softmax_row(row.data(), n);
        total += -row[i];
    }
    return total / n;
}

real loss_t2v(const Tensor& S) {
    if (S.rank() != 2 || S.dim(0) != S.dim(1)) throw ValidationError("similarity matrix must be square");
    if (!S.all_finite()) throw NumericError("similarity matrix is not finite");
    int n = S.dim(0);
    std::vector<real> col(n);
    real total = 0.0;
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) col[i] = S[std::int64_t(i) * n + j];
        log_softmax_row(col.data(), n);
        total += -col[j];
    }
    return total / n;
}

real symmetric_loss(const Tensor& fv_batch, const Tensor& ft_batch, real temperature) {
    Tensor s = similarity_matrix(fv_batch, ft_batch, temperature);
    return (loss_v2t(s) + loss_t2v(s)) / 2.0;
}

Tape::NodeId symmetric_loss_node(Tape& t, Tape::NodeId fv_batch, Tape::NodeId ft_batch, real temperature) {
    if (temperature <= 0.0) throw ValidationError("temperature must be positive");
    Tape::NodeId sv = t.scale(t.matmul(fv_batch, ft_batch, false, true), 1.0 / temperature);
    Tape::NodeId st = t.scale(t.matmul(ft_batch, fv_batch, false, true), 1.0 / temperature);
    Tape::NodeId lv = t.nll_diag(t.log_softmax_rows(sv));
    Tape::NodeId lt = t.nll_diag(t.log_softmax_rows(st));
    return t.scale(t.add(lv, lt), 0.5);
}

PretrainResult pretrain_modality(const DatasetManifest& manifest, const std::string& modality,
                                 ModalityExpertBank& bank, const TextEncoder& text, const PretrainConfig& config) {
    if (config.epochs < 1) throw ValidationError("pretrain epochs must be >= 1");
    if (config.batch_size < 1) throw ValidationError("pretrain batch size must be >= 1");
    if (config.temperature <= 0.0) throw ValidationError("temperature must be positive");

    std::vector<VolumeRecord> records = load_records(manifest, "train", modality);
    if (static_cast<int>(records.size()) < config.batch_size)
        throw ValidationError("insufficient records: modality \"" + modality + "\" has " +
                              std::to_string(records.size()) + " train records, need >= " +
                              std::to_string(config.batch_size));

    PretrainResult result;
    result.modality = modality;
    result.text_checksum_before = text.parameter_checksum();

    // frozen text branch: precompute normalized report embeddings once
    std::vector<Tensor> ft;
    std::vector<Tensor> volumes;
    ft.reserve(records.size());
    volumes.reserve(records.size());
    for (const auto& r : records) {
        ft.push_back(normalized_text(text, r.report));
        volumes.push_back(pad_to_multiple(grid_to_tensor(r.voxels), kTotalStride));
    }
    const int embed_dim = text.embed_dim();

    VisionExpert& expert = bank.expert(modality);
    std::vector<Parameter*> params = expert.parameters();
    AdamW opt(params, config.learning_rate, config.weight_decay);

    Rng shuffle_rng = Rng::derived(config.seed, 0xB17C5);
    std::vector<int> order(records.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        real epoch_total = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            std::size_t end = std::min(order.size(), start + config.batch_size);
            int n = static_cast<int>(end - start);
            if (n < 2) continue;  // a lone remainder carries no contrastive signal

            Tape t;
            std::vector<Tape::NodeId> rows;
            Tensor ft_batch({n, embed_dim});
            for (int b = 0; b < n; ++b) {
                int idx = order[start + b];
                rows.push_back(expert.embed(t, t.constant(volumes[idx])));
                for (int e = 0; e < embed_dim; ++e)
                    ft_batch[std::int64_t(b) * embed_dim + e] = ft[idx][e];
            }
            Tape::NodeId loss =
                symmetric_loss_node(t, t.stack(rows), t.constant(ft_batch), config.temperature);
            real value = t.scalar(loss);
            if (!std::isfinite(value)) {
                std::ostringstream diag;
                diag << "non-finite contrastive loss at epoch " << epoch << " batch " << batches
                     << "; parameter norms:";
                for (Parameter* p : params) diag << " " << p->name << "=" << p->value.l2_norm();
                throw NumericError(diag.str());
            }
            opt.zero_grad();
            t.backward(loss);
            opt.step();
            epoch_total += value;
            ++batches;
        }
        if (batches == 0) throw ValidationError("no usable batches (batch size too large?)");
        result.curve.push_back(EpochLoss{epoch, epoch_total / batches});
    }

    result.text_checksum_after = text.parameter_checksum();
    if (result.text_checksum_after != result.text_checksum_before)
        throw ValidationError("freezing contract violated: text encoder parameters changed during pretraining");

    ModelCheckpoint& ckpt = result.checkpoint;
    ckpt.config = {{"stage", "pretrain"},
                   {"modality", modality},
                   {"epochs", config.epochs},
                   {"learning_rate", config.learning_rate},
                   {"batch_size", config.batch_size},
                   {"temperature", config.temperature},
                   {"weight_decay", config.weight_decay},
                   {"seed", config.seed}};
    for (const auto& pt : result.curve)
        ckpt.metric_history.push_back({{"epoch", pt.epoch}, {"loss", pt.loss}});
    snapshot_params(ckpt.add_component("expert." + modality, false), params);
    CheckpointComponent& tc = ckpt.add_component("text_encoder", true);
    tc.params.push_back(CheckpointParam{"text_encoder.table", text.embedding_table()});
    tc.params.push_back(CheckpointParam{"text_encoder.dense_w", text.dense_w()});
    tc.params.push_back(CheckpointParam{"text_encoder.dense_b", text.dense_b()});
    return result;
}

void write_loss_curve(const std::string& path, const std::vector<EpochLoss>& curve) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open loss curve file for writing: " + path);
    f << "epoch,loss\n";
    for (const auto& pt : curve) f << pt.epoch << "," << pt.loss << "\n";
    if (!f) throw IoError("failed writing loss curve: " + path);
}

RetrievalResult text_to_volume_retrieval(const std::vector<VolumeRecord>& records, ModalityExpertBank& bank,
                                         const TextEncoder& text) {
    if (records.empty()) throw ValidationError("retrieval needs at least one record");
    int n = static_cast<int>(records.size());
    std::vector<Tensor> volume_embeds;
    std::vector<Tensor> text_embeds;
    volume_embeds.reserve(n);
    text_embeds.reserve(n);
    for (const auto& r : records) {
        volume_embeds.push_back(vision_encode(grid_to_tensor(r.voxels), r.modality, bank).vector);
        text_embeds.push_back(normalized_text(text, r.report));
    }
    RetrievalResult res;
    res.total = n;
    res.chance = 1.0 / n;
    for (int i = 0; i < n; ++i) {
        int best = -1;
        real best_sim = -2.0;
        for (int j = 0; j < n; ++j) {
            real dot = 0.0;
            for (std::int64_t e = 0; e < text_embeds[i].size(); ++e) dot += text_embeds[i][e] * volume_embeds[j][e];
            if (dot > best_sim) {
                best_sim = dot;
                best = j;
            }
        }
        if (best == i) ++res.correct;
    }
    res.top1 = static_cast<real>(res.correct) / n;
    return res;
}

ModalityExpertBank load_expert_bank(const std::string& dir, const std::vector<std::string>& modalities) {
    ModalityExpertBank bank(modalities, 0);  // seed irrelevant: every parameter is restored
    for (const auto& m : modalities) {
        std::string path = dir + "/expert_" + m + ".ckpt";
        ModelCheckpoint ckpt = load_checkpoint(path);
        const CheckpointComponent* comp = ckpt.find("expert." + m);
        if (!comp) throw ValidationError(path + ": no expert component for modality \"" + m + "\"");
        restore_params(*comp, bank.expert(m).parameters());
    }
    return bank;
}

}  // namespace medmap
