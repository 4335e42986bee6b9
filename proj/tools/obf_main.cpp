// Command-line entry point wiring the toolkit into complete workflows:
// preprocessing, I-VT labeling, pre-training, embedding extraction, the
// two downstream evaluations, synthetic corpus generation, and plot-data
// export. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "obf/corpus.hpp"
#include "obf/csvio.hpp"
#include "obf/errors.hpp"
#include "obf/eval.hpp"
#include "obf/fixation.hpp"
#include "obf/gaze.hpp"
#include "obf/kv.hpp"
#include "obf/model.hpp"
#include "obf/pretrain.hpp"

namespace fs = std::filesystem;
using namespace obf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct GlobalOpts {
    long seed = -1;    // -1: keep config/default seed
    int threads = -1;  // -1: keep config/default thread count
};

std::string hash_or_dash(const std::string& path) {
    return path.empty() ? "-" : file_checksum_hex(path);
}

std::string join_path(const std::string& dir, const std::string& file) {
    return (fs::path(dir) / file).string();
}

Scanpath load_single_scanpath_csv(const std::string& path) {
    CsvTable table = read_csv(path);
    const int cx = table.column("x_deg"), cy = table.column("y_deg");
    if (cx < 0 || cy < 0) throw DataError(path + ": header must be x_deg,y_deg");
    Scanpath sp;
    sp.participant_id = "-";
    sp.stimulus_id = "-";
    sp.source_tag = "-";
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        char* end = nullptr;
        const double x = std::strtod(table.rows[r][static_cast<std::size_t>(cx)].c_str(), &end);
        const double y = std::strtod(table.rows[r][static_cast<std::size_t>(cy)].c_str(), &end);
        sp.points.push_back({x, y});
    }
    if (sp.points.size() < 2) throw DataError(path + ": need at least 2 samples");
    return sp;
}

// ---------------------------------------------------------------------------

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir) {
    LoadReport report;
    const DatasetManifest manifest = read_manifest(in_dir);
    const auto recordings = load_raw_corpus(in_dir, &report);
    if (recordings.empty() && report.skipped_files.empty())
        throw DataError("corpus '" + in_dir + "' has an empty roster");

    fs::create_directories(out_dir);
    const Vec2 he = screen_halfextent_deg(manifest.geometry);

    KvFile out_manifest;
    out_manifest.entries.emplace_back("source_tag", manifest.source_tag);
    out_manifest.entries.emplace_back("native_hz", format_double(kCanonicalHz));
    out_manifest.entries.emplace_back("halfextent_x_deg", format_double(he.x));
    out_manifest.entries.emplace_back("halfextent_y_deg", format_double(he.y));

    std::string discard_csv = "file,reason\n";
    for (const auto& skipped : report.skipped_files) {
        std::string reason = "unreadable or malformed";
        for (const auto& issue : report.issues)
            if (issue.file == skipped) reason = issue.what;
        discard_csv += skipped + "," + reason + "\n";
    }

    std::size_t kept = 0;
    std::size_t file_index = 0;
    for (const auto& rec : recordings) {
        // roster order matches load order for files that were not skipped
        while (file_index < manifest.files.size() &&
               std::find(report.skipped_files.begin(), report.skipped_files.end(),
                         manifest.files[file_index].file) != report.skipped_files.end())
            ++file_index;
        const auto& entry = manifest.files[file_index];
        ++file_index;

        const PreprocessResult result = preprocess(rec);
        if (result.discarded()) {
            discard_csv += entry.file + "," + result.discard_reason + "\n";
            continue;
        }
        AtomicFileWriter w(join_path(out_dir, entry.file));
        std::string body = "x_deg,y_deg\n";
        for (const auto& p : result.scanpath->points)
            body += format_double(p.x) + "," + format_double(p.y) + "\n";
        w.write(body);
        w.commit();
        out_manifest.entries.emplace_back(
            "file", entry.file + ", " + entry.participant_id + ", " + entry.stimulus_id);
        ++kept;
    }
    for (const auto& [pid, label] : manifest.participant_labels)
        out_manifest.entries.emplace_back("participant_label",
                                          pid + ", " + std::to_string(label));
    write_kv_file(join_path(out_dir, "manifest.txt"), out_manifest);
    {
        AtomicFileWriter w(join_path(out_dir, "discard_report.csv"));
        w.write(discard_csv);
        w.commit();
    }
    std::cout << "preprocess: kept " << kept << " of " << manifest.files.size()
              << " recordings\nwrote " << join_path(out_dir, "manifest.txt") << "\nwrote "
              << join_path(out_dir, "discard_report.csv") << "\n";
    return kExitOk;
}

int cmd_ivt(const std::string& in_file, double vt_degps, double min_fix_ms,
            std::string out_prefix) {
    const Scanpath sp = load_single_scanpath_csv(in_file);
    const auto labels = ivt_labels(sp.points, vt_degps, min_fix_ms);
    const auto features = expert_features(sp.points, labels);

    if (out_prefix.empty()) out_prefix = in_file;
    const std::string labels_path = out_prefix + ".labels.csv";
    const std::string features_path = out_prefix + ".features.txt";
    {
        AtomicFileWriter w(labels_path);
        std::string body = "index,label\n";
        for (std::size_t i = 0; i < labels.size(); ++i)
            body += std::to_string(i) + "," + std::to_string(int(labels[i])) + "\n";
        w.write(body);
        w.commit();
    }
    {
        AtomicFileWriter w(features_path);
        w.write("n_fixations = " + format_double(features.n_fixations) + "\n");
        w.write("total_fixation_duration_s = " +
                format_double(features.total_fixation_duration_s) + "\n");
        w.write("mean_saccade_speed_degps = " +
                format_double(features.mean_saccade_speed_degps) + "\n");
        w.write("max_saccade_speed_degps = " + format_double(features.max_saccade_speed_degps) +
                "\n");
        w.write("mean_fixation_speed_degps = " +
                format_double(features.mean_fixation_speed_degps) + "\n");
        w.commit();
    }
    std::cout << "wrote " << labels_path << "\nwrote " << features_path << "\n";
    return kExitOk;
}

int cmd_pretrain(const std::string& config_path, const std::vector<std::string>& corpus_dirs,
                 const std::string& out_ckpt, std::string log_path,
                 const std::vector<std::string>& disable_tasks,
                 const std::vector<std::string>& exclude_sources, const GlobalOpts& g) {
    FullConfig cfg = config_path.empty() ? FullConfig{} : parse_config(config_path);
    if (g.seed >= 0) cfg.pretrain.seed = static_cast<std::uint64_t>(g.seed);
    if (g.threads > 0) cfg.pretrain.threads = g.threads;
    for (const auto& task : disable_tasks) {
        if (task == "rc") cfg.pretrain.w_rc = 0.0;
        else if (task == "pc") cfg.pretrain.w_pc = 0.0;
        else if (task == "fi") cfg.pretrain.w_fi = 0.0;
        else if (task == "cl") cfg.pretrain.w_cl = 0.0;
        else throw CLI::ValidationError("--disable-task must be one of rc, pc, fi, cl");
    }

    std::vector<Scanpath> corpus;
    for (const auto& dir : corpus_dirs) {
        auto part = load_canonical_corpus(dir);
        corpus.insert(corpus.end(), std::make_move_iterator(part.begin()),
                      std::make_move_iterator(part.end()));
    }
    if (!exclude_sources.empty()) {
        const std::set<std::string> drop(exclude_sources.begin(), exclude_sources.end());
        std::vector<Scanpath> kept;
        for (auto& sp : corpus)
            if (!drop.count(sp.source_tag)) kept.push_back(std::move(sp));
        corpus = std::move(kept);
    }

    TrainResult result = train(corpus, cfg.model, cfg.pretrain);
    result.model->save_checkpoint(out_ckpt);
    if (log_path.empty()) log_path = out_ckpt + ".log.csv";
    write_training_log(log_path, result.log);

    const auto& last = result.log.back();
    std::cout << "pretrained " << result.log.size() << " epochs on "
              << result.train_indices.size() << " scanpaths (val "
              << result.val_indices.size() << ")\n";
    std::cout << "seed = " << cfg.pretrain.seed
              << "\nconfig_hash = " << hash_or_dash(config_path) << "\n";
    auto metric = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("-"); };
    std::cout << "final val: rc_dist=" << metric(last.val.rc_dist)
              << " pc_dist=" << metric(last.val.pc_dist) << " fi_auc=" << metric(last.val.fi_auc)
              << " cl_acc=" << metric(last.val.cl_acc) << "\n";
    std::cout << "wrote " << out_ckpt << "\nwrote " << log_path << "\n";
    return kExitOk;
}

int cmd_embed(const std::string& ckpt, const std::string& in_dir, const std::string& out_store) {
    auto model = ObfModel::load_checkpoint(ckpt);
    const auto corpus = load_canonical_corpus(in_dir);
    EmbeddingStore store;
    store.dim = model->config().embedding_dim();
    store.model_checksum = file_checksum_hex(ckpt);
    std::size_t skipped = 0;
    for (const auto& sp : corpus) {
        if (static_cast<int>(sp.size()) < model->config().min_input_len()) {
            std::cerr << "embed: skipping too-short scanpath (" << sp.participant_id << ", "
                      << sp.stimulus_id << ")\n";
            ++skipped;
            continue;
        }
        const nn::Mat e = extract_embedding(*model, sp);
        EmbeddingRecord rec;
        rec.participant_id = sp.participant_id;
        rec.stimulus_id = sp.stimulus_id;
        rec.values.reserve(static_cast<std::size_t>(e.rows()));
        for (Eigen::Index i = 0; i < e.rows(); ++i)
            rec.values.push_back(static_cast<float>(e(i, 0)));
        store.append(std::move(rec));
    }
    save_embeddings(store, out_store);
    std::cout << "embedded " << store.records.size() << " scanpaths (dim " << store.dim
              << ", skipped " << skipped << ")\nwrote " << out_store << "\n";
    return kExitOk;
}

int cmd_eval_stimulus(const std::string& ckpt, const std::string& corpus_dir, int ways, int shots,
                      const std::string& mode, int episodes, int meta_train, int head_epochs,
                      bool finetune, std::string report_path, const GlobalOpts& g) {
    auto model = ObfModel::load_checkpoint(ckpt);
    const auto corpus = load_canonical_corpus(corpus_dir);

    StimulusTaskSpec spec;
    spec.c_ways = ways;
    spec.k_shots = shots;
    spec.episodes = episodes;
    spec.meta_train_stimuli = meta_train;
    spec.mode = mode == "metric" ? StimulusMode::kMetric : StimulusMode::kSupervised;

    if (spec.mode == StimulusMode::kMetric) {
        std::set<std::string> stimuli;
        for (const auto& sp : corpus) stimuli.insert(sp.stimulus_id);
        const long meta_test = static_cast<long>(stimuli.size()) -
                               std::min<long>(meta_train, static_cast<long>(stimuli.size()));
        if (meta_test < ways)
            throw CLI::ValidationError(
                "--ways " + std::to_string(ways) + " with --meta-train " +
                std::to_string(meta_train) + " leaves a meta-test set of " +
                std::to_string(meta_test) + " stimuli (of " + std::to_string(stimuli.size()) +
                "); the meta-testing set would be empty");
    }

    MlpHeadConfig head;
    head.epochs = head_epochs;
    head.finetune_encoder = finetune;
    const std::uint64_t seed = g.seed >= 0 ? static_cast<std::uint64_t>(g.seed) : 1;
    Rng rng(seed);

    const StimulusEvalResult result =
        spec.mode == StimulusMode::kMetric
            ? eval_stimulus_metric(*model, corpus, spec, head, rng)
            : eval_stimulus_supervised(*model, corpus, spec, head, rng);

    if (report_path.empty()) report_path = "stimulus_report.csv";
    {
        AtomicFileWriter w(report_path);
        w.write("# seed = " + std::to_string(seed) + "\n");
        w.write("# checkpoint = " + file_checksum_hex(ckpt) + "\n");
        w.write("mode,ways,shots,accuracy,n_correct,n_total,episodes\n");
        w.write(mode + "," + std::to_string(ways) + "," + std::to_string(shots) + "," +
                format_double(result.accuracy) + "," + std::to_string(result.n_correct) + "," +
                std::to_string(result.n_total) + "," + std::to_string(result.episodes) + "\n");
        w.commit();
    }
    std::cout << mode << " " << ways << "-way " << shots << "-shot accuracy = "
              << format_double(result.accuracy) << " (" << result.n_correct << "/"
              << result.n_total << ")\nwrote " << report_path << "\n";
    return kExitOk;
}

void write_eval_report(AtomicFileWriter& w, const std::string& set_name, const EvalReport& r) {
    for (std::size_t f = 0; f < r.folds.size(); ++f)
        w.write(set_name + "," + std::to_string(f) + "," + format_double(r.folds[f].accuracy) +
                "," + format_double(r.folds[f].auc) + "," + format_double(r.folds[f].f1) + "," +
                std::to_string(r.folds[f].n_test) + "\n");
    w.write(set_name + ",pooled," + format_double(r.accuracy) + "," + format_double(r.auc) + "," +
            format_double(r.f1) + ",-\n");
}

int cmd_eval_participant(const std::string& ckpt, const std::string& corpus_dir,
                         bool expert_baseline_flag, std::string report_path,
                         const GlobalOpts& g) {
    auto model = ObfModel::load_checkpoint(ckpt);
    DatasetManifest manifest;
    const auto corpus = load_canonical_corpus(corpus_dir, &manifest);
    if (manifest.participant_labels.empty())
        throw DataError("corpus has no participant_label entries; participant classification "
                        "needs binary labels in the manifest");

    const auto roster = stimulus_roster(corpus);
    const auto records = build_participant_records(corpus, manifest.participant_labels);
    const std::uint64_t seed = g.seed >= 0 ? static_cast<std::uint64_t>(g.seed) : 1;

    LassoConfig lasso_cfg;
    const EvalReport obf_report = eval_participants(*model, records, roster, lasso_cfg, seed);
    EvalReport expert_report;
    if (expert_baseline_flag)
        expert_report = expert_baseline(records, roster, lasso_cfg, seed);

    if (report_path.empty()) report_path = "participant_report.csv";
    {
        AtomicFileWriter w(report_path);
        w.write("# seed = " + std::to_string(seed) + "\n");
        w.write("# checkpoint = " + file_checksum_hex(ckpt) + "\n");
        w.write("set,fold,accuracy,auc,f1,n_test\n");
        write_eval_report(w, "obf", obf_report);
        if (expert_baseline_flag) write_eval_report(w, "expert", expert_report);
        w.commit();
    }
    std::cout << "participants: " << records.size() << ", roster: " << roster.size()
              << " stimuli\n";
    std::cout << "obf: accuracy=" << format_double(obf_report.accuracy)
              << " auc=" << format_double(obf_report.auc) << " f1=" << format_double(obf_report.f1)
              << "\n";
    if (expert_baseline_flag)
        std::cout << "expert: accuracy=" << format_double(expert_report.accuracy)
                  << " auc=" << format_double(expert_report.auc)
                  << " f1=" << format_double(expert_report.f1) << "\n";
    std::cout << "wrote " << report_path << "\n";
    return kExitOk;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, const GlobalOpts& g) {
    SynthConfig cfg = config_path.empty() ? SynthConfig{} : parse_synth_config(config_path);
    if (g.seed >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed);
    write_synth_corpus(cfg, out_dir);
    std::cout << "wrote synthetic corpus: " << cfg.n_participants << " participants x "
              << cfg.n_stimuli << " stimuli x " << cfg.scanpaths_per_pair << " to " << out_dir
              << "\n";
    return kExitOk;
}

int cmd_plotdata(const std::string& log_path, const std::string& store_path,
                 const std::string& pairs_path, std::string out_path) {
    if (!log_path.empty()) {
        const CsvTable t = read_csv(log_path);
        const int ce = t.column("epoch");
        const int cols[4] = {t.column("loss_rc"), t.column("loss_pc"), t.column("loss_fi"),
                             t.column("loss_cl")};
        if (ce < 0) throw DataError(log_path + ": not a training log");
        if (out_path.empty()) out_path = log_path + ".curves.csv";
        AtomicFileWriter w(out_path);
        w.write("epoch,loss_rc,loss_pc,loss_fi,loss_cl\n");
        for (const auto& row : t.rows) {
            std::string line = row[static_cast<std::size_t>(ce)];
            for (int c : cols)
                line += "," + (c >= 0 ? row[static_cast<std::size_t>(c)] : std::string());
            w.write(line + "\n");
        }
        w.commit();
        std::cout << "wrote " << out_path << "\n";
        return kExitOk;
    }

    // |E(x1)-E(x2)| difference vectors labeled by same/different scanpath
    const EmbeddingStore store = load_embeddings(store_path);
    const CsvTable pairs = read_csv(pairs_path);
    const int ci = pairs.column("i"), cj = pairs.column("j");
    if (ci < 0 || cj < 0) throw DataError(pairs_path + ": header must be i,j (record indices)");
    if (out_path.empty()) out_path = store_path + ".pairs.csv";
    AtomicFileWriter w(out_path);
    std::string header = "s";
    for (int d = 0; d < store.dim; ++d) header += ",d" + std::to_string(d);
    w.write(header + "\n");
    for (const auto& row : pairs.rows) {
        const long i = parse_long_field("i", row[static_cast<std::size_t>(ci)]);
        const long j = parse_long_field("j", row[static_cast<std::size_t>(cj)]);
        if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= store.records.size() ||
            static_cast<std::size_t>(j) >= store.records.size())
            throw DataError(pairs_path + ": record index out of range");
        const auto& a = store.records[static_cast<std::size_t>(i)];
        const auto& b = store.records[static_cast<std::size_t>(j)];
        const int same = (a.participant_id == b.participant_id && a.stimulus_id == b.stimulus_id)
                             ? 1
                             : 0;
        std::string line = std::to_string(same);
        for (int d = 0; d < store.dim; ++d)
            line += "," + format_double(std::abs(static_cast<double>(a.values[static_cast<std::size_t>(d)]) -
                                                 static_cast<double>(b.values[static_cast<std::size_t>(d)])));
        w.write(line + "\n");
    }
    w.commit();
    std::cout << "wrote " << out_path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"OBF scanpath representation-learning toolkit"};
    app.require_subcommand(1);
    GlobalOpts g;
    app.add_option("--seed", g.seed, "Random seed (overrides config seeds)");
    app.add_option("--threads", g.threads, "Worker threads (results are thread-count invariant)");

    // preprocess
    std::string pp_in, pp_out;
    auto* preprocess_cmd =
        app.add_subcommand("preprocess", "Convert a raw corpus to canonical 60 Hz scanpaths");
    preprocess_cmd->add_option("--in", pp_in, "Raw corpus directory")->required();
    preprocess_cmd->add_option("--out", pp_out, "Output directory")->required();

    // ivt
    std::string ivt_in, ivt_out;
    double vt_degps = kIvtVelocityThreshDegps;
    double min_fix_ms = kIvtMinFixationMs;
    auto* ivt_cmd = app.add_subcommand("ivt", "I-VT fixation labels and expert features");
    ivt_cmd->add_option("--in", ivt_in, "Canonical scanpath CSV")->required();
    ivt_cmd->add_option("--vt-degps", vt_degps, "Velocity threshold (deg/s)");
    ivt_cmd->add_option("--min-fix-ms", min_fix_ms, "Minimum fixation length (ms)");
    ivt_cmd->add_option("--out", ivt_out, "Output prefix (default: input path)");

    // pretrain
    std::string pt_config, pt_out, pt_log;
    std::vector<std::string> pt_corpus, pt_disable, pt_exclude;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Four-task self-supervised pre-training");
    pretrain_cmd->add_option("--config", pt_config, "Config file (key = value)");
    pretrain_cmd->add_option("--corpus", pt_corpus, "Canonical corpus directory (repeatable)")
        ->required();
    pretrain_cmd->add_option("--out", pt_out, "Checkpoint output path")->required();
    pretrain_cmd->add_option("--log", pt_log, "Training log CSV (default: <out>.log.csv)");
    pretrain_cmd->add_option("--disable-task", pt_disable, "Drop a pre-task: rc, pc, fi, cl");
    pretrain_cmd->add_option("--exclude-source", pt_exclude, "Drop a source tag from the corpus");

    // embed
    std::string em_ckpt, em_in, em_out;
    auto* embed_cmd = app.add_subcommand("embed", "Extract fixed-length embeddings");
    embed_cmd->add_option("--ckpt", em_ckpt, "Checkpoint")->required();
    embed_cmd->add_option("--in", em_in, "Canonical corpus directory")->required();
    embed_cmd->add_option("--out", em_out, "Embedding store output")->required();

    // eval-stimulus
    std::string es_ckpt, es_corpus, es_mode = "supervised", es_report;
    int es_ways = 10, es_shots = 1, es_episodes = 500, es_meta_train = 200, es_head_epochs = 200;
    bool es_finetune = false;
    auto* evs_cmd = app.add_subcommand("eval-stimulus", "c-way k-shot stimulus prediction");
    evs_cmd->add_option("--ckpt", es_ckpt, "Checkpoint")->required();
    evs_cmd->add_option("--corpus", es_corpus, "Canonical corpus directory")->required();
    evs_cmd->add_option("--ways", es_ways, "Number of stimulus classes")->required();
    evs_cmd->add_option("--shots", es_shots, "Labeled users per stimulus")->required();
    evs_cmd->add_option("--mode", es_mode, "supervised or metric")
        ->check(CLI::IsMember({"supervised", "metric"}));
    evs_cmd->add_option("--episodes", es_episodes, "Evaluation episodes (metric mode)");
    evs_cmd->add_option("--meta-train", es_meta_train, "Stimuli reserved for meta-training");
    evs_cmd->add_option("--head-epochs", es_head_epochs, "Head training epochs");
    evs_cmd->add_flag("--finetune", es_finetune, "Fine-tune the encoder end to end");
    evs_cmd->add_option("--report", es_report, "Report CSV path");

    // eval-participant
    std::string ep_ckpt, ep_corpus, ep_report;
    bool ep_expert = false;
    auto* evp_cmd =
        app.add_subcommand("eval-participant", "Participant classification from embeddings");
    evp_cmd->add_option("--ckpt", ep_ckpt, "Checkpoint")->required();
    evp_cmd->add_option("--corpus", ep_corpus, "Canonical corpus directory")->required();
    evp_cmd->add_flag("--expert-baseline", ep_expert, "Also run the expert-feature baseline");
    evp_cmd->add_option("--report", ep_report, "Report CSV path");

    // synth
    std::string sy_config, sy_out;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic raw corpus");
    synth_cmd->add_option("--config", sy_config, "Synth config file");
    synth_cmd->add_option("--out", sy_out, "Output directory")->required();

    // plotdata
    std::string pd_log, pd_store, pd_pairs, pd_out;
    auto* plot_cmd = app.add_subcommand("plotdata", "Emit plot-ready CSV data");
    plot_cmd->add_option("--log", pd_log, "Training log to reshape into loss curves");
    plot_cmd->add_option("--store", pd_store, "Embedding store for pair differences");
    plot_cmd->add_option("--pairs", pd_pairs, "CSV of record index pairs (i,j)");
    plot_cmd->add_option("--out", pd_out, "Output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (preprocess_cmd->parsed()) return cmd_preprocess(pp_in, pp_out);
        if (ivt_cmd->parsed()) return cmd_ivt(ivt_in, vt_degps, min_fix_ms, ivt_out);
        if (pretrain_cmd->parsed())
            return cmd_pretrain(pt_config, pt_corpus, pt_out, pt_log, pt_disable, pt_exclude, g);
        if (embed_cmd->parsed()) return cmd_embed(em_ckpt, em_in, em_out);
        if (evs_cmd->parsed())
            return cmd_eval_stimulus(es_ckpt, es_corpus, es_ways, es_shots, es_mode, es_episodes,
                                     es_meta_train, es_head_epochs, es_finetune, es_report, g);
        if (evp_cmd->parsed())
            return cmd_eval_participant(ep_ckpt, ep_corpus, ep_expert, ep_report, g);
        if (synth_cmd->parsed()) return cmd_synth(sy_config, sy_out, g);
        if (plot_cmd->parsed()) {
            if (pd_log.empty() && (pd_store.empty() || pd_pairs.empty()))
                throw CLI::ValidationError("plotdata needs --log or both --store and --pairs");
            return cmd_plotdata(pd_log, pd_store, pd_pairs, pd_out);
        }
    } catch (const CLI::Error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitUsage;
}
