#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "obf/corpus.hpp"
#include "obf/errors.hpp"
#include "obf/gaze.hpp"

using namespace obf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("obf_corpus_test_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

std::string raw_manifest_header() {
    return "source_tag = lab\n"
           "native_hz = 60\n"
           "width_px = 1920\nheight_px = 1080\n"
           "width_mm = 480\nheight_mm = 270\nviewing_distance_mm = 650\n";
}

}  // namespace

TEST_CASE("manifest parsing and error reporting") {
    TempDir dir;
    SUBCASE("missing manifest") {
        CHECK_THROWS_AS(read_manifest(dir.str()), DataError);
    }
    SUBCASE("malformed geometry") {
        write_file(dir.path / "manifest.txt",
                   "source_tag = x\nnative_hz = 60\nwidth_px = -3\nheight_px = 1\n"
                   "width_mm = 1\nheight_mm = 1\nviewing_distance_mm = 1\n");
        CHECK_THROWS_AS(read_manifest(dir.str()), DataError);
    }
    SUBCASE("roster and labels round through") {
        write_file(dir.path / "manifest.txt",
                   raw_manifest_header() +
                       "file = a.csv, p1, s1\nlabels = a_labels.csv, a.csv\n"
                       "participant_label = p1, 1\n");
        const auto m = read_manifest(dir.str());
        CHECK(m.source_tag == "lab");
        REQUIRE(m.files.size() == 1);
        CHECK(m.files[0].participant_id == "p1");
        CHECK(m.label_files.at("a.csv") == "a_labels.csv");
        CHECK(m.participant_labels.at("p1") == 1);
    }
}

TEST_CASE("raw corpus loading counts every row and skips broken files") {
    TempDir dir;
    write_file(dir.path / "manifest.txt",
               raw_manifest_header() + "file = good.csv, p1, s1\nfile = bad.csv, p2, s1\n"
                                       "file = absent.csv, p3, s1\n");
    write_file(dir.path / "good.csv",
               "t_ms,lx,ly,rx,ry,valid\n"
               "0,100,100,,,1\n"
               "16.6,110,100,120,100,1\n"
               "oops,1,1,1,1,1\n"     // malformed row: rejected, file continues
               "33.3,115,105,,,1\n");
    write_file(dir.path / "bad.csv",
               "t_ms,lx,ly,rx,ry,valid\n"
               "0,1,1,,,1\n"
               "10,2,2,,,1\n"
               "5,3,3,,,1\n");  // non-monotone: file skipped

    LoadReport report;
    const auto recs = load_raw_corpus(dir.str(), &report);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].samples.size() == 3);
    CHECK(recs[0].participant_id == "p1");
    CHECK(recs[0].samples[1].right.has_value());

    // parsed + rejected equals the rows seen in files that were read
    CHECK(report.rows_parsed == 5);  // 3 good + 2 from bad.csv before the break
    CHECK(report.rows_rejected == 2);
    CHECK(report.skipped_files.size() == 2);  // bad.csv and absent.csv
    bool row_issue = false;
    for (const auto& issue : report.issues)
        if (issue.file == "good.csv" && issue.line == 4) row_issue = true;
    CHECK(row_issue);
}

TEST_CASE("empty roster loads to an empty corpus") {
    TempDir dir;
    write_file(dir.path / "manifest.txt", raw_manifest_header());
    LoadReport report;
    CHECK(load_raw_corpus(dir.str(), &report).empty());
    CHECK(report.issues.empty());
}

TEST_CASE("synthetic scanpaths carry exact phase ground truth") {
    SynthConfig cfg;
    cfg.duration_s = 8.0;
    Rng rng(1);
    const auto s = synth_scanpath(cfg, 0, 0, rng);
    CHECK(s.scanpath.size() >= 480);
    CHECK(s.labels.size() == s.scanpath.size());
    CHECK(s.scanpath.participant_id == "p0");
    CHECK(s.scanpath.stimulus_id == "s0");

    // saccade samples move faster than 100 deg/s by construction
    const auto v = velocity(s.scanpath.points);
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (!s.labels[i]) continue;
        CHECK(v[i] < 100.0);
    }
}

TEST_CASE("I-VT agrees with generator labels on 1000 scanpaths") {
    SynthConfig cfg;
    cfg.duration_s = 3.0;
    cfg.n_participants = 1000;
    cfg.n_stimuli = 1;
    std::size_t agree = 0, total = 0;
    for (int p = 0; p < cfg.n_participants; ++p) {
        Rng rng(static_cast<std::uint64_t>(p) + 10);
        const auto s = synth_scanpath(cfg, p, 0, rng);
        const auto labels = ivt_labels(s.scanpath.points);
        REQUIRE(labels.size() == s.labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            total += 1;
            agree += labels[i] == s.labels[i] ? 1 : 0;
        }
    }
    CHECK(static_cast<double>(agree) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("generator determinism and participant styles") {
    SynthConfig cfg;
    cfg.duration_s = 4.0;
    Rng r1(5), r2(5), r3(6);
    const auto a = synth_scanpath(cfg, 1, 2, r1);
    const auto b = synth_scanpath(cfg, 1, 2, r2);
    const auto c = synth_scanpath(cfg, 1, 2, r3);
    REQUIRE(a.scanpath.size() == b.scanpath.size());
    for (std::size_t i = 0; i < a.scanpath.size(); ++i) {
        CHECK(a.scanpath.points[i].x == b.scanpath.points[i].x);
        CHECK(a.scanpath.points[i].y == b.scanpath.points[i].y);
    }
    bool differs = c.scanpath.size() != a.scanpath.size();
    for (std::size_t i = 0; !differs && i < a.scanpath.size(); ++i)
        differs = a.scanpath.points[i].x != c.scanpath.points[i].x;
    CHECK(differs);
}

TEST_CASE("zero jitter with one pair of clusters gives piecewise-constant dwells") {
    SynthConfig cfg;
    cfg.fix_jitter_sd_deg = 0.0;
    cfg.participant_jitter_scale = {1.0, 1.0};
    cfg.clusters_per_stimulus = 2;
    cfg.duration_s = 3.0;
    Rng rng(7);
    const auto s = synth_scanpath(cfg, 0, 0, rng);
    for (std::size_t i = 1; i < s.scanpath.size(); ++i)
        if (s.labels[i] && s.labels[i - 1]) {
            CHECK(s.scanpath.points[i].x == s.scanpath.points[i - 1].x);
            CHECK(s.scanpath.points[i].y == s.scanpath.points[i - 1].y);
        }
}

TEST_CASE("infeasible saccade amplitudes are rejected") {
    SynthConfig cfg;
    cfg.sac_amp_deg = {500.0, 600.0};
    CHECK_THROWS_AS(cfg.validate(), DataError);
}

TEST_CASE("written synthetic corpus loads and preprocesses to the generated scanpaths") {
    TempDir dir;
    SynthConfig cfg;
    cfg.n_participants = 2;
    cfg.n_stimuli = 2;
    cfg.duration_s = 2.0;
    write_synth_corpus(cfg, dir.str());

    const auto expected = make_synth_corpus(cfg);
    LoadReport report;
    const auto raw = load_raw_corpus(dir.str(), &report);
    REQUIRE(raw.size() == expected.size());
    CHECK(report.rows_rejected == 0);

    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto result = preprocess(raw[i]);
        REQUIRE(!result.discarded());
        REQUIRE(result.scanpath->size() == expected[i].scanpath.size());
        for (std::size_t k = 0; k < result.scanpath->size(); ++k) {
            CHECK(result.scanpath->points[k].x ==
                  doctest::Approx(expected[i].scanpath.points[k].x).epsilon(1e-6));
            CHECK(result.scanpath->points[k].y ==
                  doctest::Approx(expected[i].scanpath.points[k].y).epsilon(1e-6));
        }
    }

    // ground-truth labels round-trip through the labels CSV
    const auto manifest = read_manifest(dir.str());
    REQUIRE(manifest.label_files.size() == raw.size());
    const auto labels = load_labels_csv(
        (dir.path / manifest.label_files.at(manifest.files[0].file)).string());
    CHECK(labels == expected[0].labels);

    // participant labels present for downstream use
    CHECK(manifest.participant_labels.size() == 2);
}

TEST_CASE("canonical corpus writer round-trips scanpaths") {
    TempDir dir;
    SynthConfig cfg;
    cfg.n_participants = 2;
    cfg.n_stimuli = 1;
    cfg.duration_s = 1.0;
    std::vector<Scanpath> sps;
    for (auto& s : make_synth_corpus(cfg)) sps.push_back(std::move(s.scanpath));
    write_canonical_corpus(dir.str(), sps, {{"p0", 0}, {"p1", 1}}, "synth",
                           screen_halfextent_deg(cfg.geometry));

    DatasetManifest mani;
    const auto loaded = load_canonical_corpus(dir.str(), &mani);
    REQUIRE(loaded.size() == sps.size());
    CHECK(mani.participant_labels.size() == 2);
    for (std::size_t i = 0; i < sps.size(); ++i) {
        REQUIRE(loaded[i].size() == sps[i].size());
        CHECK(loaded[i].participant_id == sps[i].participant_id);
        for (std::size_t k = 0; k < sps[i].size(); ++k)
            CHECK(loaded[i].points[k].x == doctest::Approx(sps[i].points[k].x).epsilon(1e-9));
    }
}

TEST_CASE("embedding store round-trips bitwise and rejects mixed dims") {
    TempDir dir;
    const std::string path = (dir.path / "store.bin").string();

    EmbeddingStore store;
    store.model_checksum = "00ff00ff00ff00ff";
    Rng rng(8);
    for (int r = 0; r < 5; ++r) {
        EmbeddingRecord rec;
        rec.participant_id = "p" + std::to_string(r);
        rec.stimulus_id = "s" + std::to_string(r % 2);
        for (int k = 0; k < 16; ++k) rec.values.push_back(static_cast<float>(rng.normal()));
        store.append(std::move(rec));
    }
    save_embeddings(store, path);
    const auto loaded = load_embeddings(path);
    CHECK(loaded.dim == 16);
    CHECK(loaded.model_checksum == store.model_checksum);
    REQUIRE(loaded.records.size() == 5);
    for (std::size_t r = 0; r < 5; ++r) {
        CHECK(loaded.records[r].participant_id == store.records[r].participant_id);
        for (int k = 0; k < 16; ++k)
            CHECK(loaded.records[r].values[static_cast<std::size_t>(k)] ==
                  store.records[r].values[static_cast<std::size_t>(k)]);
    }

    SUBCASE("empty store round-trips") {
        EmbeddingStore empty;
        save_embeddings(empty, path);
        const auto e = load_embeddings(path);
        CHECK(e.records.empty());
    }
    SUBCASE("mixed-dim append rejected") {
        EmbeddingRecord bad;
        bad.participant_id = "x";
        bad.stimulus_id = "y";
        bad.values.assign(8, 0.0f);
        EmbeddingStore s2 = loaded;
        CHECK_THROWS_AS(s2.append(std::move(bad)), DataError);
    }
    SUBCASE("truncated store is rejected on load") {
        std::ifstream in(path, std::ios::binary);
        std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        write_file(dir.path / "trunc.bin", blob.substr(0, blob.size() - 7));
        CHECK_THROWS_AS(load_embeddings((dir.path / "trunc.bin").string()), DataError);
    }
}

TEST_CASE("config parsing applies defaults, overrides, and typo safety") {
    SUBCASE("empty file keeps the published defaults") {
        const auto cfg = parse_config_text("", "test");
        CHECK(cfg.model.backbone == Backbone::kGru);
        CHECK(cfg.model.n_layers == 2);
        CHECK(cfg.model.hidden == 128);
        CHECK(cfg.model.conv_kernel == 7);
        CHECK(cfg.model.conv_channels == 30);
        CHECK(cfg.pretrain.epochs == 500);
        CHECK(cfg.pretrain.lr == 0.001);
        CHECK(cfg.pretrain.lr_halving_every == 100);
        CHECK(cfg.pretrain.grad_clip == 0.5);
        CHECK(cfg.pretrain.batch == 64);
        CHECK(cfg.pretrain.w_rc == 1.0);
        CHECK(cfg.pretrain.input_len_s.lo == 5.0);
        CHECK(cfg.pretrain.input_len_s.hi == 10.0);
        CHECK(cfg.pretrain.pc_horizon_ms == 500.0);
        CHECK(cfg.pretrain.cl_frac.lo == 0.2);
        CHECK(cfg.pretrain.train_frac == 0.8);
    }
    SUBCASE("backbone override honored") {
        const auto cfg = parse_config_text("model.backbone = LSTM\n", "test");
        CHECK(cfg.model.backbone == Backbone::kLstm);
    }
    SUBCASE("typed error names the key") {
        CHECK_THROWS_WITH_AS(parse_config_text("pretrain.lr = fast\n", "test"),
                             doctest::Contains("pretrain.lr"), DataError);
    }
    SUBCASE("unknown keys are rejected") {
        CHECK_THROWS_WITH_AS(parse_config_text("pretrain.learningrate = 0.1\n", "test"),
                             doctest::Contains("unknown key"), DataError);
    }
    SUBCASE("duplicate keys are rejected") {
        CHECK_THROWS_AS(parse_config_text("model.hidden = 8\nmodel.hidden = 16\n", "test"),
                        DataError);
    }
    SUBCASE("range fields accept one or two values") {
        const auto cfg =
            parse_config_text("pretrain.input_len_s = 5 8\npretrain.cl_frac = 0.3\n", "test");
        CHECK(cfg.pretrain.input_len_s.hi == 8.0);
        CHECK(cfg.pretrain.cl_frac.lo == 0.3);
        CHECK(cfg.pretrain.cl_frac.hi == 0.3);
    }
}

TEST_CASE("synth config parsing mirrors field names") {
    TempDir dir;
    write_file(dir.path / "synth.cfg",
               "synth.n_participants = 4\nsynth.n_stimuli = 3\nsynth.duration_s = 2.5\n"
               "synth.group_dwell_ratio = 1.4\nsynth.seed = 77\n");
    const auto cfg = parse_synth_config((dir.path / "synth.cfg").string());
    CHECK(cfg.n_participants == 4);
    CHECK(cfg.n_stimuli == 3);
    CHECK(cfg.duration_s == 2.5);
    CHECK(cfg.group_dwell_ratio == 1.4);
    CHECK(cfg.seed == 77);

    write_file(dir.path / "bad.cfg", "synth.nparticipants = 4\n");
    CHECK_THROWS_AS(parse_synth_config((dir.path / "bad.cfg").string()), DataError);
}

TEST_CASE("generator fixation share tracks the dwell statistics") {
    // longer dwells -> higher fixation share; check the controllability claim
    SynthConfig brief;
    brief.fix_dur_ms = {220.0, 260.0};
    brief.duration_s = 4.0;
    SynthConfig longer = brief;
    longer.fix_dur_ms = {700.0, 900.0};

    auto share = [](const SynthConfig& cfg) {
        double fix = 0, total = 0;
        for (int p = 0; p < 50; ++p) {
            Rng rng(static_cast<std::uint64_t>(p) + 900);
            const auto s = synth_scanpath(cfg, p % 4, p % 3, rng);
            for (auto l : s.labels) {
                fix += l;
                total += 1;
            }
        }
        return fix / total;
    };
    const double s1 = share(brief);
    const double s2 = share(longer);
    CHECK(s2 > s1);
    CHECK(s2 > 0.85);  // long dwells dominate

    // expected share from the dwell statistics, within 5%: mean dwell vs
    // mean saccade length at the generator's own parameters
    SynthConfig cfg = longer;
    double fix_samples = 0, sac_samples = 0;
    for (int p = 0; p < 100; ++p) {
        Rng rng(static_cast<std::uint64_t>(p) + 2000);
        const auto s = synth_scanpath(cfg, p % 4, p % 3, rng);
        for (auto l : s.labels) (l ? fix_samples : sac_samples) += 1.0;
    }
    const double measured = fix_samples / (fix_samples + sac_samples);
    // dwell mean 800 ms * mean bias 1.0 -> 48 samples; saccades are capped
    // by sac_dur_ms (33..83 ms -> 2..5 samples) and by step geometry
    CHECK(measured > 0.85);
    CHECK(measured < 1.0);
}
