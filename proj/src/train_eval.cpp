#include "medmap/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "medmap/nn.hpp"

namespace medmap {

int label_index(const VolumeRecord& record) {
    int idx = -1;
    for (std::size_t k = 0; k < record.labels.size(); ++k) {
        if (record.labels[k] == 0) continue;
        if (record.labels[k] != 1)
            throw ValidationError("record " + record.id + ": label values must be 0 or 1");
        if (idx >= 0) throw ValidationError("record " + record.id + ": multiple active classes (argmax evaluation is single-label)");
        idx = int(k);
    }
    if (idx < 0) throw ValidationError("record " + record.id + ": no active class");
    return idx;
}

CsaModel build_model(const DatasetManifest& manifest, ModalityExpertBank* bank, const FinetuneConfig& config) {
    CsaConfig mc;
    mc.n_classes = manifest.n_classes();
    mc.modalities = manifest.modality_vocabulary;
    mc.flags = config.flags;
    mc.seed = config.seed;
    CsaModel model(mc);
    if (config.flags.use_pretrained) {
        if (!bank) throw ValidationError("finetune: use_pretrained requires an expert bank");
        model.init_from_bank(*bank);
    }
    return model;
}

std::string kl_direction_name(KlDirection d) { return d == KlDirection::forward ? "forward" : "reverse"; }

KlDirection kl_direction_from_name(const std::string& s) {
    if (s == "forward") return KlDirection::forward;
    if (s == "reverse") return KlDirection::reverse;
    throw ValidationError("unknown KL direction \"" + s + "\"");
}

namespace {

struct Prepared {
    Tensor volume;  // [D,H,W]
    Tensor text;    // raw frozen-encoder embedding
    Tensor labels;  // [K] multi-hot as floats
    std::string modality;
};

std::vector<Prepared> prepare(const std::vector<VolumeRecord>& records, const TextEncoder& text, int n_classes) {
    std::vector<Prepared> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (int(r.labels.size()) != n_classes)
            throw ValidationError("record " + r.id + ": label vector has wrong class count");
        Prepared p;
        p.volume = grid_to_tensor(r.voxels);
        p.text = text.encode(r.report);
        Tensor lab({n_classes});
        for (int k = 0; k < n_classes; ++k) lab[k] = real(r.labels[std::size_t(k)]);
        p.labels = std::move(lab);
        p.modality = r.modality;
        out.push_back(std::move(p));
    }
    return out;
}

// component name -> live parameter list, one entry per model component
std::vector<std::pair<std::string, std::vector<Parameter*>>> model_components(CsaModel& model) {
    std::vector<std::pair<std::string, std::vector<Parameter*>>> out;
    for (auto& [m, conv] : model.convs) out.emplace_back("conv." + m, conv.parameters());
    for (auto& [m, pool] : model.pools) {
        std::vector<Parameter*> ps;
        pool.collect(ps);
        out.emplace_back("pool." + m, std::move(ps));
    }
    out.emplace_back("swin", model.swin.parameters());
    out.emplace_back("projector", model.projector.parameters());
    {
        std::vector<Parameter*> ps;
        model.gate.collect(ps);
        out.emplace_back("gate", std::move(ps));
    }
    {
        std::vector<Parameter*> ps;
        model.cct.collect(ps);
        out.emplace_back("cct", std::move(ps));
    }
    {
        std::vector<Parameter*> ps;
        model.classifier.collect(ps);
        out.emplace_back("classifier", std::move(ps));
    }
    return out;
}

}  // namespace

MetricsReport evaluate_model(CsaModel& model, const std::vector<VolumeRecord>& records, const TextEncoder& text) {
    if (records.empty()) throw ValidationError("evaluate: empty record set");
    int k = model.config().n_classes;
    std::vector<std::vector<real>> probs;
    std::vector<int> labels;
    probs.reserve(records.size());
    labels.reserve(records.size());
    for (const auto& r : records) {
        CSAIntermediates out = model.run(grid_to_tensor(r.voxels), r.modality, text.encode(r.report));
        std::vector<real> row(out.probabilities.data(), out.probabilities.data() + k);
        probs.push_back(std::move(row));
        labels.push_back(label_index(r));
    }
    return compute_metrics(probs, labels, k);
}

MetricsReport evaluate(const DatasetManifest& manifest, CsaModel& model, const TextEncoder& text,
                       const std::string& split) {
    return evaluate_model(model, load_records(manifest, split), text);
}

FinetuneResult finetune(const DatasetManifest& manifest, ModalityExpertBank* bank, const TextEncoder& text,
                        const FinetuneConfig& config) {
    if (config.epochs < 1) throw ValidationError("finetune: epochs must be >= 1");
    if (config.batch_size < 1) throw ValidationError("finetune: batch_size must be >= 1");
    if (config.learning_rate <= 0) throw ValidationError("finetune: learning_rate must be > 0");
    if (config.eval_every < 1) throw ValidationError("finetune: eval_every must be >= 1");
    if (config.kl_temperature <= 0) throw ValidationError("finetune: kl_temperature must be > 0");

    std::vector<VolumeRecord> train = load_records(manifest, "train");
    if (train.empty()) throw ValidationError("finetune: manifest has no train records");
    std::vector<VolumeRecord> val = load_records(manifest, "val");

    CsaModel model = build_model(manifest, bank, config);
    int n_classes = manifest.n_classes();
    std::vector<Prepared> prep = prepare(train, text, n_classes);

    FinetuneResult res;
    res.text_checksum_before = text.parameter_checksum();

    AdamW opt(model.parameters(), config.learning_rate, config.weight_decay);
    Rng shuffle_rng = Rng::derived(config.seed, 0xF17E7ULL);
    std::vector<std::size_t> order(prep.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    bool have_final = false;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        ScheduleState state{epoch, config.epochs};
        real lc = lambda_c(state), ls = lambda_s(state);
        shuffle_rng.shuffle(order);

        real loss_sum = 0.0, bce_sum = 0.0;
        int n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size)) {
            std::size_t end = std::min(order.size(), start + std::size_t(config.batch_size));
            real inv = 1.0 / real(end - start);
            opt.zero_grad();
            real batch_loss = 0.0, batch_bce = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                Prepared& p = prep[order[i]];
                Tape tp;
                CsaNodes nodes = model.forward(tp, p.volume, p.modality, p.text);
                Tape::NodeId bce = tp.bce_mean(nodes.probabilities, p.labels);
                Tape::NodeId total;
                if (config.flags.use_csa) {
                    Tape::NodeId kl = kl_alignment_node(tp, nodes.text_projected, nodes.f_fusion,
                                                        config.kl_temperature, config.kl_direction);
                    total = tp.add(tp.scale(bce, lc), tp.scale(kl, ls));
                } else {
                    total = bce;  // text-free variants train on the plain classification loss
                }
                tp.backward(tp.scale(total, inv));
                batch_loss += tp.scalar(total) * inv;
                batch_bce += tp.scalar(bce) * inv;
            }
            if (!std::isfinite(batch_loss))
                throw NumericError("finetune: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(n_batches));
            opt.step();
            loss_sum += batch_loss;
            bce_sum += batch_bce;
            ++n_batches;
        }

        if (text.parameter_checksum() != res.text_checksum_before)
            throw ValidationError("finetune: frozen text encoder changed during epoch " + std::to_string(epoch));

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / real(n_batches);
        rec.bce = bce_sum / real(n_batches);
        if (!val.empty() && (epoch % config.eval_every == 0 || epoch == config.epochs)) {
            MetricsReport report = evaluate_model(model, val, text);
            rec.val_accuracy = report.accuracy;
            rec.val_macro_auc = report.macro_auc;
            rec.evaluated = true;
            if (epoch == config.epochs) {
                res.final_metrics = report;
                res.final_split = "val";
                have_final = true;
            }
        }
        res.history.push_back(rec);
    }
    if (!have_final) {
        res.final_metrics = evaluate_model(model, train, text);
        res.final_split = "train";
    }
    res.text_checksum_after = text.parameter_checksum();

    ModelCheckpoint ckpt;
    ckpt.config = {
        {"type", "finetune"},
        {"epochs", config.epochs},
        {"learning_rate", config.learning_rate},
        {"batch_size", config.batch_size},
        {"weight_decay", config.weight_decay},
        {"kl_temperature", config.kl_temperature},
        {"seed", config.seed},
        {"eval_every", config.eval_every},
        {"kl_direction", kl_direction_name(config.kl_direction)},
        {"flags",
         {{"use_pretrained", config.flags.use_pretrained},
          {"use_cct", config.flags.use_cct},
          {"use_csa", config.flags.use_csa}}},
        {"n_classes", n_classes},
        {"modalities", manifest.modality_vocabulary},
        {"class_names", manifest.class_names},
    };
    for (const auto& rec : res.history) {
        nlohmann::json row = {{"epoch", rec.epoch}, {"loss", rec.loss}, {"bce", rec.bce}};
        if (rec.evaluated) {
            row["val_acc"] = rec.val_accuracy;
            row["val_auc"] = rec.val_macro_auc;
        }
        ckpt.metric_history.push_back(row);
    }
    for (auto& [name, params] : model_components(model)) snapshot_params(ckpt.add_component(name, false), params);
    CheckpointComponent& tc = ckpt.add_component("text_encoder", true);
    tc.params.push_back(CheckpointParam{"text_encoder.table", text.embedding_table()});
    tc.params.push_back(CheckpointParam{"text_encoder.dense_w", text.dense_w()});
    tc.params.push_back(CheckpointParam{"text_encoder.dense_b", text.dense_b()});
    res.checkpoint = std::move(ckpt);
    return res;
}

CsaModel model_from_checkpoint(const ModelCheckpoint& ckpt) {
    const nlohmann::json& c = ckpt.config;
    if (!c.contains("n_classes") || !c.contains("modalities") || !c.contains("flags"))
        throw ValidationError("checkpoint does not describe a fine-tuned model");
    CsaConfig mc;
    mc.n_classes = c.at("n_classes").get<int>();
    mc.modalities = c.at("modalities").get<std::vector<std::string>>();
    mc.seed = c.at("seed").get<std::uint64_t>();
    mc.flags.use_pretrained = c.at("flags").at("use_pretrained").get<bool>();
    mc.flags.use_cct = c.at("flags").at("use_cct").get<bool>();
    mc.flags.use_csa = c.at("flags").at("use_csa").get<bool>();
    (void)kl_direction_from_name(c.value("kl_direction", "forward"));  // validate early
    CsaModel model(mc);
    for (auto& [name, params] : model_components(model)) {
        const CheckpointComponent* comp = ckpt.find(name);
        if (!comp) throw ValidationError("checkpoint missing component \"" + name + "\"");
        restore_params(*comp, params);
    }
    return model;
}

void write_history(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open history file for writing: " + path);
    f << "epoch,loss,val_acc,val_auc\n";
    for (const auto& rec : history) {
        f << rec.epoch << "," << rec.loss << ",";
        if (rec.evaluated)
            f << rec.val_accuracy << "," << rec.val_macro_auc;
        else
            f << "nan,nan";
        f << "\n";
    }
    if (!f) throw IoError("failed writing history: " + path);
}

AblationTable ablate(const DatasetManifest& manifest, ModalityExpertBank& bank, const TextEncoder& text,
                     const FinetuneConfig& base, const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ValidationError("ablate: needs at least one seed");
    std::vector<VolumeRecord> test = load_records(manifest, "test");
    if (test.empty()) throw ValidationError("ablate: manifest has no test records");

    const std::vector<std::pair<std::string, AblationFlags>> grid = {
        {"Baseline", {false, false, false}},
        {"+MAVLP", {true, false, false}},
        {"+CCT", {true, true, false}},
        {"+CSA", {true, true, true}},
    };
    AblationTable table;
    table.seeds = seeds;
    for (const auto& [name, flags] : grid) {
        AblationRow row;
        row.name = name;
        row.flags = flags;
        for (std::uint64_t seed : seeds) {
            FinetuneConfig cfg = base;
            cfg.flags = flags;
            cfg.seed = seed;
            FinetuneResult result = finetune(manifest, &bank, text, cfg);
            CsaModel model = model_from_checkpoint(result.checkpoint);
            row.accuracies.push_back(evaluate_model(model, test, text).accuracy);
        }
        real n = real(row.accuracies.size());
        real mean = std::accumulate(row.accuracies.begin(), row.accuracies.end(), 0.0) / n;
        real var = 0.0;
        for (real a : row.accuracies) var += (a - mean) * (a - mean);
        row.mean_acc = mean;
        row.std_acc = row.accuracies.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
        table.rows.push_back(std::move(row));
    }
    return table;
}

void write_ablation(const std::string& path, const AblationTable& table) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open ablation file for writing: " + path);
    f << "row,mean_acc,std_acc,seeds\n";
    for (const auto& row : table.rows)
        f << row.name << "," << row.mean_acc << "," << row.std_acc << "," << table.seeds.size() << "\n";
    if (!f) throw IoError("failed writing ablation table: " + path);
}

}  // namespace medmap
