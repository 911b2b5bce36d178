#include "medmap/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "medmap/cam.hpp"
#include "medmap/checkpoint.hpp"
#include "medmap/contrastive.hpp"
#include "medmap/png_io.hpp"
#include "medmap/run_config.hpp"
#include "medmap/train_eval.hpp"
#include "medmap/tsne.hpp"

namespace medmap {

namespace {

using nlohmann::json;

json config_or_default(const std::string& path) { return path.empty() ? json::object() : load_json_file(path); }

// Help text of the innermost subcommand the parser reached.
std::string deepest_help(const CLI::App& app) {
    const CLI::App* a = &app;
    while (!a->get_subcommands().empty()) a = a->get_subcommands().front();
    return a->help();
}

void write_text_file(const std::string& path, const std::string& body) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open output file: " + path);
    f << body;
    if (!f) throw IoError("failed writing output file: " + path);
}

void run_synth(const std::string& spec_path, const std::string& out_dir) {
    PhantomSpec spec = phantom_spec_from_json(config_or_default(spec_path));
    DatasetManifest manifest = synthesize_dataset(spec, out_dir);
    write_resolved_config(out_dir + "/resolved_config.json", to_json(spec));
    int train = 0, val = 0, test = 0;
    for (const auto& e : manifest.records) {
        if (e.split == "train") ++train;
        else if (e.split == "val") ++val;
        else ++test;
    }
    std::cout << "synthesized " << manifest.records.size() << " records (" << train << " train / " << val
              << " val / " << test << " test) in " << out_dir << "\n";
}

void run_pretrain(const std::string& manifest_path, const std::string& modality, const std::string& config_path,
                  const std::string& out) {
    DatasetManifest manifest = load_manifest(manifest_path);
    PretrainConfig cfg = pretrain_config_from_json(config_or_default(config_path));
    ModalityExpertBank bank({modality}, cfg.seed);
    TextEncoder text;
    PretrainResult res = pretrain_modality(manifest, modality, bank, text, cfg);
    save_checkpoint(res.checkpoint, out);
    write_loss_curve(out + ".loss.csv", res.curve);
    json resolved = to_json(cfg);
    resolved["modality"] = modality;
    write_resolved_config(out + ".config.json", resolved);
    std::cout << "pretrained " << modality << ": loss " << res.curve.front().loss << " -> "
              << res.curve.back().loss << " over " << res.curve.size() << " epochs; text encoder checksum verified\n";
}

void run_finetune(const std::string& manifest_path, const std::string& experts_dir, const std::string& config_path,
                  const std::string& out) {
    DatasetManifest manifest = load_manifest(manifest_path);
    FinetuneConfig cfg = finetune_config_from_json(config_or_default(config_path));
    TextEncoder text;
    std::optional<ModalityExpertBank> bank;
    if (cfg.flags.use_pretrained) {
        if (experts_dir.empty())
            throw ValidationError("finetune: config enables pretrained initialization; pass --experts DIR");
        bank = load_expert_bank(experts_dir, manifest.modality_vocabulary);
    }
    FinetuneResult res = finetune(manifest, bank ? &*bank : nullptr, text, cfg);
    save_checkpoint(res.checkpoint, out);
    write_history(out + ".history.csv", res.history);
    write_resolved_config(out + ".config.json", to_json(cfg));
    std::cout << "finetuned " << cfg.epochs << " epochs: " << res.final_split << " accuracy "
              << res.final_metrics.accuracy << ", macro AUC " << res.final_metrics.macro_auc << "\n";
}

void run_eval(const std::string& ckpt_path, const std::string& manifest_path, const std::string& split,
              const std::string& report_path) {
    CsaModel model = model_from_checkpoint(load_checkpoint(ckpt_path));
    DatasetManifest manifest = load_manifest(manifest_path);
    TextEncoder text;
    MetricsReport report = evaluate(manifest, model, text, split);
    json j = report.to_json();
    j["split"] = split;
    write_text_file(report_path, j.dump(2) + "\n");
    std::cout << "split " << split << ": accuracy " << report.accuracy << ", macro AUC " << report.macro_auc
              << " -> " << report_path << "\n";
}

void run_ablate(const std::string& manifest_path, const std::string& experts_dir, const std::string& config_path,
                const std::string& out) {
    DatasetManifest manifest = load_manifest(manifest_path);
    AblateSettings settings = ablate_settings_from_json(config_or_default(config_path));
    if (experts_dir.empty()) throw ValidationError("ablate: pretrained rows need --experts DIR");
    ModalityExpertBank bank = load_expert_bank(experts_dir, manifest.modality_vocabulary);
    TextEncoder text;
    AblationTable table = ablate(manifest, bank, text, settings.base, settings.seeds);
    write_ablation(out, table);
    write_resolved_config(out + ".config.json", to_json(settings));
    for (const auto& row : table.rows)
        std::cout << row.name << ": mean accuracy " << row.mean_acc << " (std " << row.std_acc << ", "
                  << row.accuracies.size() << " seeds)\n";
}

void run_viz_tsne(const std::string& ckpt_path, const std::string& manifest_path, const std::string& split,
                  const std::string& out_csv, const std::string& png_path, const std::string& embedding,
                  real perplexity, int iterations, std::uint64_t seed) {
    CsaModel model = model_from_checkpoint(load_checkpoint(ckpt_path));
    DatasetManifest manifest = load_manifest(manifest_path);
    std::vector<VolumeRecord> records = load_records(manifest, split);
    if (records.empty()) throw ValidationError("viz tsne: split \"" + split + "\" has no records");
    TextEncoder text;

    std::vector<Tensor> embeds;
    std::vector<int> labels;
    for (const auto& r : records) {
        CSAIntermediates out = model.run(grid_to_tensor(r.voxels), r.modality, text.encode(r.report));
        if (embedding == "conv") {
            const Tensor& g = out.f_v.data;
            int c = g.dim(0);
            std::int64_t cells = g.size() / c;
            Tensor e({c});
            for (int ch = 0; ch < c; ++ch) {
                real s = 0.0;
                for (std::int64_t i = 0; i < cells; ++i) s += g[ch * cells + i];
                e[ch] = s / real(cells);
            }
            embeds.push_back(std::move(e));
        } else {
            embeds.push_back(out.f_fusion.vector);
        }
        labels.push_back(label_index(r));
    }
    int n = int(embeds.size()), e = int(embeds[0].size());
    Tensor x({n, e});
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < e; ++k) x[std::int64_t(i) * e + k] = embeds[std::size_t(i)][k];

    TsneConfig tc;
    tc.perplexity = perplexity;
    tc.iterations = iterations;
    tc.seed = seed;
    TsneResult res = tsne_embed(x, tc);

    std::ostringstream csv;
    csv << "id,label,x,y\n";
    for (int i = 0; i < n; ++i)
        csv << records[std::size_t(i)].id << "," << labels[std::size_t(i)] << "," << res.points[std::int64_t(i) * 2]
            << "," << res.points[std::int64_t(i) * 2 + 1] << "\n";
    write_text_file(out_csv, csv.str());
    if (!png_path.empty()) write_png_rgb8(png_path, 800, 800, render_scatter_rgb8(res.points, labels, 800));

    json resolved = {{"command", "viz tsne"},   {"split", split},           {"embedding", embedding},
                     {"perplexity", perplexity}, {"iterations", iterations}, {"seed", seed},
                     {"records", n},             {"kl_post_exaggeration", res.kl_post_exaggeration},
                     {"kl_final", res.kl_final}};
    write_resolved_config(out_csv + ".config.json", resolved);
    std::cout << "embedded " << n << " records: KL " << res.kl_post_exaggeration << " -> " << res.kl_final
              << " -> " << out_csv << "\n";
}

void run_viz_cam(const std::string& ckpt_path, const std::string& manifest_path, const std::string& record_id,
                 int class_index, const std::string& out_mvol, const std::string& png_path) {
    CsaModel model = model_from_checkpoint(load_checkpoint(ckpt_path));
    DatasetManifest manifest = load_manifest(manifest_path);
    std::vector<VolumeRecord> records = load_records(manifest);
    const VolumeRecord* hit = nullptr;
    for (const auto& r : records)
        if (r.id == record_id) hit = &r;
    if (!hit) throw ValidationError("viz cam: record \"" + record_id + "\" not in manifest");
    TextEncoder text;

    CamVolume cam = cam_map(model, *hit, text, class_index);
    VolumeRecord out_rec;
    out_rec.id = hit->id + ".cam";
    out_rec.modality = "CAM";
    out_rec.voxels = cam.voxels;
    out_rec.labels.assign(std::size_t(model.config().n_classes), 0);
    out_rec.labels[std::size_t(class_index)] = 1;  // marks the explained class
    write_mvol(out_rec, out_mvol);
    if (!png_path.empty())
        write_png_gray8(png_path, cam.voxels.w, cam.voxels.h, slice_to_gray8(cam.voxels, cam.voxels.d / 2));

    json resolved = {{"command", "viz cam"}, {"record", record_id}, {"class_index", class_index}};
    write_resolved_config(out_mvol + ".config.json", resolved);
    std::cout << "wrote CAM for record " << record_id << ", class " << class_index << " -> " << out_mvol << "\n";
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"Desk-scale two-stage medical vision-language pipeline"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
    synth->add_option("--spec", spec_path, "Dataset spec JSON (defaults to the standard benchmark)");
    synth->add_option("--out", out_dir, "Output dataset directory")->required();

    std::string pt_manifest, pt_modality, pt_config, pt_out;
    auto* pretrain = app.add_subcommand("pretrain", "Contrastively pretrain one modality expert");
    pretrain->add_option("--manifest", pt_manifest, "Dataset manifest JSON")->required();
    pretrain->add_option("--modality", pt_modality, "Modality tag to train")->required();
    pretrain->add_option("--config", pt_config, "Pretraining config JSON");
    pretrain->add_option("--out", pt_out, "Output checkpoint path")->required();

    std::string ft_manifest, ft_experts, ft_config, ft_out;
    auto* finetune = app.add_subcommand("finetune", "Fine-tune the fusion classifier");
    finetune->add_option("--manifest", ft_manifest, "Dataset manifest JSON")->required();
    finetune->add_option("--experts", ft_experts, "Directory of expert_<modality>.ckpt files");
    finetune->add_option("--config", ft_config, "Fine-tuning config JSON");
    finetune->add_option("--out", ft_out, "Output checkpoint path")->required();

    std::string ev_ckpt, ev_manifest, ev_split = "test", ev_report;
    auto* eval = app.add_subcommand("eval", "Evaluate a fine-tuned checkpoint");
    eval->add_option("--ckpt", ev_ckpt, "Fine-tuned checkpoint")->required();
    eval->add_option("--manifest", ev_manifest, "Dataset manifest JSON")->required();
    eval->add_option("--split", ev_split, "Manifest split to score");
    eval->add_option("--report", ev_report, "Metrics report JSON output")->required();

    std::string ab_manifest, ab_experts, ab_config, ab_out;
    auto* ablate = app.add_subcommand("ablate", "Run the four-row component ablation");
    ablate->add_option("--manifest", ab_manifest, "Dataset manifest JSON")->required();
    ablate->add_option("--experts", ab_experts, "Directory of expert_<modality>.ckpt files");
    ablate->add_option("--config", ab_config, "Ablation config JSON");
    ablate->add_option("--out", ab_out, "Ablation table CSV output")->required();

    auto* viz = app.add_subcommand("viz", "Diagnostic visualizations");
    viz->require_subcommand(1);

    std::string ts_ckpt, ts_manifest, ts_split = "test", ts_out, ts_png, ts_embedding = "fusion";
    real ts_perplexity = 12.0;
    int ts_iterations = 500;
    std::uint64_t ts_seed = 0;
    auto* tsne = viz->add_subcommand("tsne", "2-D feature scatter of a split");
    tsne->add_option("--ckpt", ts_ckpt, "Fine-tuned checkpoint")->required();
    tsne->add_option("--manifest", ts_manifest, "Dataset manifest JSON")->required();
    tsne->add_option("--split", ts_split, "Manifest split to embed");
    tsne->add_option("--out", ts_out, "Points CSV output")->required();
    tsne->add_option("--png", ts_png, "Optional scatter PNG");
    tsne->add_option("--embedding", ts_embedding, "Feature to embed: fused or conv-stream")
        ->check(CLI::IsMember({"fusion", "conv"}));
    tsne->add_option("--perplexity", ts_perplexity, "Target perplexity");
    tsne->add_option("--iterations", ts_iterations, "Optimizer iterations");
    tsne->add_option("--seed", ts_seed, "Layout seed");

    std::string cm_ckpt, cm_manifest, cm_record, cm_out, cm_png;
    int cm_class = 0;
    auto* cam = viz->add_subcommand("cam", "Class activation map for one record");
    cam->add_option("--ckpt", cm_ckpt, "Fine-tuned checkpoint")->required();
    cam->add_option("--manifest", cm_manifest, "Dataset manifest JSON")->required();
    cam->add_option("--record", cm_record, "Record id to explain")->required();
    cam->add_option("--class", cm_class, "Class index to explain")->required();
    cam->add_option("--out", cm_out, "CAM volume output (MVOL)")->required();
    cam->add_option("--png", cm_png, "Optional mid-slice PNG");

    try {
        app.parse(argc, argv);
        if (*synth) run_synth(spec_path, out_dir);
        if (*pretrain) run_pretrain(pt_manifest, pt_modality, pt_config, pt_out);
        if (*finetune) run_finetune(ft_manifest, ft_experts, ft_config, ft_out);
        if (*eval) run_eval(ev_ckpt, ev_manifest, ev_split, ev_report);
        if (*ablate) run_ablate(ab_manifest, ab_experts, ab_config, ab_out);
        if (*tsne) run_viz_tsne(ts_ckpt, ts_manifest, ts_split, ts_out, ts_png, ts_embedding, ts_perplexity,
                                ts_iterations, ts_seed);
        if (*cam) run_viz_cam(cm_ckpt, cm_manifest, cm_record, cm_class, cm_out, cm_png);
        return 0;
    } catch (const CLI::CallForHelp&) {
        std::cout << deepest_help(app);
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << deepest_help(app);
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace medmap
