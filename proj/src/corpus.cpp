#include "obf/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "obf/csvio.hpp"
#include "obf/errors.hpp"
#include "obf/kv.hpp"

namespace obf {

namespace fs = std::filesystem;

namespace {

constexpr double kDegToRad = 0.01745329251994329577;

std::string join_path(const std::string& dir, const std::string& file) {
    return (fs::path(dir) / file).string();
}

DatasetManifest parse_manifest_kv(const KvFile& kv, const std::string& origin) {
    DatasetManifest m;
    m.source_tag = kv.get("source_tag");
    m.native_hz = kv.get_double("native_hz");
    m.canonical = kv.has("halfextent_x_deg");
    if (m.canonical) {
        m.halfextent_deg = {kv.get_double("halfextent_x_deg"), kv.get_double("halfextent_y_deg")};
    } else {
        m.geometry.width_px = kv.get_double("width_px");
        m.geometry.height_px = kv.get_double("height_px");
        m.geometry.width_mm = kv.get_double("width_mm");
        m.geometry.height_mm = kv.get_double("height_mm");
        m.geometry.viewing_distance_mm = kv.get_double("viewing_distance_mm");
        try {
            m.geometry.validate();
        } catch (const DataError& e) {
            throw DataError(origin + ": malformed geometry: " + e.what());
        }
    }
    for (const auto& entry : kv.get_all("file")) {
        auto parts = split(entry, ',');
        if (parts.size() != 3)
            throw DataError(origin + ": file roster line needs '<csv>, <participant>, <stimulus>'");
        m.files.push_back({trim(parts[0]), trim(parts[1]), trim(parts[2])});
    }
    for (const auto& entry : kv.get_all("labels")) {
        auto parts = split(entry, ',');
        if (parts.size() != 2)
            throw DataError(origin + ": labels line needs '<labels_csv>, <csv>'");
        m.label_files[trim(parts[1])] = trim(parts[0]);
    }
    for (const auto& entry : kv.get_all("participant_label")) {
        auto parts = split(entry, ',');
        if (parts.size() != 2)
            throw DataError(origin + ": participant_label line needs '<participant>, <0|1>'");
        const long v = parse_long_field("participant_label", trim(parts[1]));
        if (v != 0 && v != 1) throw DataError(origin + ": participant_label must be 0 or 1");
        m.participant_labels[trim(parts[0])] = static_cast<int>(v);
    }
    return m;
}

}  // namespace

DatasetManifest read_manifest(const std::string& dir) {
    const std::string path = join_path(dir, "manifest.txt");
    if (!fs::exists(path)) throw DataError("missing manifest: " + path);
    return parse_manifest_kv(read_kv_file(path), path);
}

// ---------------------------------------------------------------------------
// raw corpus
// ---------------------------------------------------------------------------

namespace {

bool parse_cell_double(const std::string& s, double& out) {
    if (trim(s).empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end != s.c_str() && trim(end).empty() && std::isfinite(out);
}

}  // namespace

std::vector<RawRecording> load_raw_corpus(const std::string& dir, LoadReport* report) {
    const DatasetManifest m = read_manifest(dir);
    if (m.canonical) throw DataError(dir + ": expected a raw corpus, found a canonical manifest");

    LoadReport local;
    LoadReport& rep = report ? *report : local;
    std::vector<RawRecording> out;

    for (const auto& entry : m.files) {
        const std::string path = join_path(dir, entry.file);
        CsvTable table;
        try {
            table = read_csv(path);
        } catch (const DataError& e) {
            rep.issues.push_back({entry.file, 0, e.what()});
            rep.skipped_files.push_back(entry.file);
            continue;
        }
        const int c_t = table.column("t_ms"), c_lx = table.column("lx"),
                  c_ly = table.column("ly"), c_rx = table.column("rx"),
                  c_ry = table.column("ry"), c_valid = table.column("valid");
        if (c_t < 0 || c_lx < 0 || c_ly < 0 || c_rx < 0 || c_ry < 0 || c_valid < 0) {
            rep.issues.push_back({entry.file, 0, "header must be t_ms,lx,ly,rx,ry,valid"});
            rep.skipped_files.push_back(entry.file);
            continue;
        }

        RawRecording rec;
        rec.geometry = m.geometry;
        rec.source_tag = m.source_tag;
        rec.participant_id = entry.participant_id;
        rec.stimulus_id = entry.stimulus_id;
        rec.native_hz = m.native_hz;

        bool file_ok = true;
        for (std::size_t r = 0; r < table.rows.size(); ++r) {
            const auto& row = table.rows[r];
            const long line = static_cast<long>(r) + 2;  // 1-based, after header
            if (row.size() != table.header.size()) {
                rep.issues.push_back({entry.file, line, "wrong cell count"});
                ++rep.rows_rejected;
                continue;
            }
            RawSample s;
            double lx, ly, rx, ry, valid_flag;
            if (!parse_cell_double(row[static_cast<std::size_t>(c_t)], s.t_ms) ||
                !parse_cell_double(row[static_cast<std::size_t>(c_valid)], valid_flag)) {
                rep.issues.push_back({entry.file, line, "unparsable t_ms/valid"});
                ++rep.rows_rejected;
                continue;
            }
            s.valid = valid_flag != 0.0;
            const bool has_l = parse_cell_double(row[static_cast<std::size_t>(c_lx)], lx) &&
                               parse_cell_double(row[static_cast<std::size_t>(c_ly)], ly);
            const bool has_r = parse_cell_double(row[static_cast<std::size_t>(c_rx)], rx) &&
                               parse_cell_double(row[static_cast<std::size_t>(c_ry)], ry);
            if (has_l) s.left = Vec2{lx, ly};
            if (has_r) s.right = Vec2{rx, ry};
            if (s.valid && !has_l && !has_r) s.valid = false;  // no eye present
            if (!rec.samples.empty() && !(s.t_ms > rec.samples.back().t_ms)) {
                rep.issues.push_back({entry.file, line, "non-monotone timestamp"});
                ++rep.rows_rejected;
                file_ok = false;
                break;
            }
            rec.samples.push_back(s);
            ++rep.rows_parsed;
        }
        if (!file_ok) {
            rep.skipped_files.push_back(entry.file);
            continue;
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// canonical corpus
// ---------------------------------------------------------------------------

std::vector<Scanpath> load_canonical_corpus(const std::string& dir,
                                            DatasetManifest* manifest_out) {
    const DatasetManifest m = read_manifest(dir);
    if (!m.canonical)
        throw DataError(dir + ": expected a canonical corpus (run the preprocess command first)");
    if (manifest_out) *manifest_out = m;

    std::vector<Scanpath> out;
    for (const auto& entry : m.files) {
        const std::string path = join_path(dir, entry.file);
        CsvTable table = read_csv(path);
        const int cx = table.column("x_deg"), cy = table.column("y_deg");
        if (cx < 0 || cy < 0) throw DataError(path + ": header must be x_deg,y_deg");
        Scanpath sp;
        sp.source_tag = m.source_tag;
        sp.participant_id = entry.participant_id;
        sp.stimulus_id = entry.stimulus_id;
        sp.screen_halfextent_deg = m.halfextent_deg;
        sp.points.reserve(table.rows.size());
        for (std::size_t r = 0; r < table.rows.size(); ++r) {
            double x, y;
            if (!parse_cell_double(table.rows[r][static_cast<std::size_t>(cx)], x) ||
                !parse_cell_double(table.rows[r][static_cast<std::size_t>(cy)], y))
                throw DataError(path + ":" + std::to_string(r + 2) + ": unparsable coordinates");
            sp.points.push_back({x, y});
        }
        out.push_back(std::move(sp));
    }
    return out;
}

FixationLabels load_labels_csv(const std::string& path) {
    CsvTable table = read_csv(path);
    const int ci = table.column("index"), cl = table.column("label");
    if (ci < 0 || cl < 0) throw DataError(path + ": header must be index,label");
    FixationLabels labels(table.rows.size(), 0);
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const long idx = parse_long_field("index", table.rows[r][static_cast<std::size_t>(ci)]);
        const long lab = parse_long_field("label", table.rows[r][static_cast<std::size_t>(cl)]);
        if (idx < 0 || static_cast<std::size_t>(idx) >= labels.size() || (lab != 0 && lab != 1))
            throw DataError(path + ":" + std::to_string(r + 2) + ": bad index/label");
        labels[static_cast<std::size_t>(idx)] = static_cast<std::uint8_t>(lab);
    }
    return labels;
}

void write_canonical_corpus(const std::string& dir, const std::vector<Scanpath>& scanpaths,
                            const std::map<std::string, int>& participant_labels,
                            const std::string& source_tag, const Vec2& halfextent_deg) {
    fs::create_directories(dir);
    KvFile mani;
    mani.entries.emplace_back("source_tag", source_tag);
    mani.entries.emplace_back("native_hz", format_double(kCanonicalHz));
    mani.entries.emplace_back("halfextent_x_deg", format_double(halfextent_deg.x));
    mani.entries.emplace_back("halfextent_y_deg", format_double(halfextent_deg.y));
    for (std::size_t i = 0; i < scanpaths.size(); ++i) {
        const Scanpath& sp = scanpaths[i];
        const std::string file = "sp" + std::to_string(i) + ".csv";
        AtomicFileWriter w(join_path(dir, file));
        std::string body = "x_deg,y_deg\n";
        for (const auto& p : sp.points)
            body += format_double(p.x) + "," + format_double(p.y) + "\n";
        w.write(body);
        w.commit();
        mani.entries.emplace_back("file", file + ", " + sp.participant_id + ", " + sp.stimulus_id);
    }
    for (const auto& [pid, label] : participant_labels)
        mani.entries.emplace_back("participant_label", pid + ", " + std::to_string(label));
    write_kv_file(join_path(dir, "manifest.txt"), mani);
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
    if (n_participants < 1 || n_stimuli < 1 || scanpaths_per_pair < 1 ||
        clusters_per_stimulus < 2)
        throw DataError("synth counts must be positive (and >= 2 clusters)");
    if (!(duration_s > 0)) throw DataError("synth.duration_s must be positive");
    if (!fix_dur_ms.well_ordered() || !(fix_dur_ms.lo > 0) || !sac_dur_ms.well_ordered() ||
        !(sac_dur_ms.lo > 0) || !sac_amp_deg.well_ordered() || !(sac_amp_deg.lo > 0))
        throw DataError("synth duration/amplitude ranges must be positive and ordered");
    if (fix_jitter_sd_deg < 0 || fix_jitter_sd_deg > 0.5)
        throw DataError("synth.fix_jitter_sd_deg must be in [0, 0.5] to keep fixations slow");
    if (!(layout_patch_frac > 0.0) || layout_patch_frac > 1.0)
        throw DataError("synth.layout_patch_frac must be in (0, 1]");
    geometry.validate();
    const Vec2 he = screen_halfextent_deg(geometry);
    const double usable = 2.0 * std::min(he.x, he.y) - 4.0;  // 2 deg margin per side
    if (sac_amp_deg.lo > usable)
        throw DataError("synth.sac_amp_deg minimum exceeds the usable screen span (" +
                        format_double(usable) + " deg)");
}

namespace {

// Minimum per-step displacement inside a saccade sweep; 2.4 deg/sample is
// 144 deg/s at 60 Hz, comfortably past the 100 deg/s threshold. Shorter
// hops down to kMinClusterDistDeg stay single-sample jumps at >= 126
// deg/s, which still clears the threshold with jitter on the endpoints.
constexpr double kSaccadeStepDeg = 2.4;
constexpr double kMinClusterDistDeg = 2.1;
constexpr int kMinFixationSamples = 12;  // 200 ms at 60 Hz

std::vector<Vec2> stimulus_layout(const SynthConfig& cfg, int stimulus) {
    Rng rng(mix_seed(cfg.layout_seed, static_cast<std::uint64_t>(stimulus) + 1));
    const Vec2 he = screen_halfextent_deg(cfg.geometry);
    const double bx = he.x - 2.0, by = he.y - 2.0;
    const double min_dist = std::max(kMinClusterDistDeg, cfg.sac_amp_deg.lo);

    // The layout lives in a stimulus-specific patch of the usable area.
    const double px = bx * cfg.layout_patch_frac, py = by * cfg.layout_patch_frac;
    const Vec2 anchor{rng.uniform(-(bx - px), bx - px), rng.uniform(-(by - py), by - py)};

    std::vector<Vec2> centers;
    int tries = 0, stalled = 0;
    while (static_cast<int>(centers.size()) < cfg.clusters_per_stimulus) {
        if (++tries > 50000)
            throw DataError("synth: cannot place clusters at the requested amplitude; "
                            "reduce sac_amp_deg or clusters_per_stimulus");
        Vec2 c{anchor.x + rng.uniform(-px, px), anchor.y + rng.uniform(-py, py)};
        bool ok = true;
        for (const auto& prev : centers) {
            const double d = std::hypot(c.x - prev.x, c.y - prev.y);
            if (d < min_dist || d > cfg.sac_amp_deg.hi * 1.5) ok = false;
        }
        if (ok) {
            centers.push_back(c);
            stalled = 0;
        } else if (++stalled > 200) {
            centers.clear();  // a bad prefix can make completion impossible
            stalled = 0;
        }
    }
    return centers;
}

}  // namespace

SynthScanpath synth_scanpath(const SynthConfig& cfg, int participant, int stimulus, Rng& rng) {
    cfg.validate();
    const std::vector<Vec2> centers = stimulus_layout(cfg, stimulus);

    Rng style(mix_seed(cfg.seed, fnv1a64("participant") + static_cast<std::uint64_t>(participant)));
    const double jitter_scale =
        style.uniform(cfg.participant_jitter_scale.lo, cfg.participant_jitter_scale.hi);
    double dwell_bias =
        style.uniform(cfg.participant_dwell_bias.lo, cfg.participant_dwell_bias.hi);
    if (cfg.participant_group(participant) == 1) dwell_bias *= cfg.group_dwell_ratio;
    const double jitter_sd = cfg.fix_jitter_sd_deg * jitter_scale;

    const std::size_t target = static_cast<std::size_t>(std::llround(cfg.duration_s * kCanonicalHz));
    SynthScanpath out;
    out.scanpath.source_tag = cfg.source_tag;
    out.scanpath.participant_id = "p" + std::to_string(participant);
    out.scanpath.stimulus_id = "s" + std::to_string(stimulus);
    out.scanpath.screen_halfextent_deg = screen_halfextent_deg(cfg.geometry);

    auto& pts = out.scanpath.points;
    auto& labels = out.labels;

    std::size_t cluster = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(centers.size()) - 1));
    Vec2 anchor = centers[cluster];

    while (pts.size() < target) {
        // fixation phase
        const double dur_ms = rng.uniform(cfg.fix_dur_ms.lo, cfg.fix_dur_ms.hi) * dwell_bias;
        const int n_fix = std::max(kMinFixationSamples,
                                   static_cast<int>(std::llround(dur_ms * kCanonicalHz / 1000.0)));
        for (int k = 0; k < n_fix; ++k) {
            pts.push_back({anchor.x + rng.normal(0.0, jitter_sd),
                           anchor.y + rng.normal(0.0, jitter_sd)});
            labels.push_back(1);
        }
        if (pts.size() >= target) break;

        // saccade phase: linear sweep to another cluster, landing exactly
        // on the next anchor so the following fixation starts slow
        std::size_t next = static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(centers.size()) - 2));
        if (next >= cluster) ++next;
        const Vec2 from = anchor;
        const Vec2 to = centers[next];
        const double dist = std::hypot(to.x - from.x, to.y - from.y);
        const int n_by_step = std::max(1, static_cast<int>(std::floor(dist / kSaccadeStepDeg)));
        const int n_by_dur = std::max(
            1, static_cast<int>(std::llround(rng.uniform(cfg.sac_dur_ms.lo, cfg.sac_dur_ms.hi) *
                                             kCanonicalHz / 1000.0)));
        const int n_sac = std::min(n_by_step, n_by_dur);
        for (int k = 1; k <= n_sac; ++k) {
            const double u = static_cast<double>(k) / n_sac;
            pts.push_back({from.x + u * (to.x - from.x), from.y + u * (to.y - from.y)});
            labels.push_back(0);
        }
        cluster = next;
        anchor = to;
    }
    return out;
}

std::vector<SynthScanpath> make_synth_corpus(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SynthScanpath> out;
    for (int p = 0; p < cfg.n_participants; ++p)
        for (int s = 0; s < cfg.n_stimuli; ++s)
            for (int k = 0; k < cfg.scanpaths_per_pair; ++k) {
                Rng rng(mix_seed(cfg.seed, fnv1a64("path") +
                                               static_cast<std::uint64_t>(
                                                   (p * cfg.n_stimuli + s) *
                                                       cfg.scanpaths_per_pair +
                                                   k)));
                out.push_back(synth_scanpath(cfg, p, s, rng));
            }
    return out;
}

void write_synth_corpus(const SynthConfig& cfg, const std::string& dir) {
    cfg.validate();
    fs::create_directories(dir);
    const auto corpus = make_synth_corpus(cfg);

    // Invert the degree mapping so preprocess() reproduces the scanpath.
    const double mmppx_x = cfg.geometry.width_mm / cfg.geometry.width_px;
    const double mmppx_y = cfg.geometry.height_mm / cfg.geometry.height_px;
    const double d = cfg.geometry.viewing_distance_mm;

    KvFile mani;
    mani.entries.emplace_back("source_tag", cfg.source_tag);
    mani.entries.emplace_back("native_hz", format_double(kCanonicalHz));
    mani.entries.emplace_back("width_px", format_double(cfg.geometry.width_px));
    mani.entries.emplace_back("height_px", format_double(cfg.geometry.height_px));
    mani.entries.emplace_back("width_mm", format_double(cfg.geometry.width_mm));
    mani.entries.emplace_back("height_mm", format_double(cfg.geometry.height_mm));
    mani.entries.emplace_back("viewing_distance_mm",
                              format_double(cfg.geometry.viewing_distance_mm));

    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const Scanpath& sp = corpus[i].scanpath;
        const std::string base = "rec_" + sp.participant_id + "_" + sp.stimulus_id + "_" +
                                 std::to_string(i);
        {
            AtomicFileWriter w(join_path(dir, base + ".csv"));
            std::string body = "t_ms,lx,ly,rx,ry,valid\n";
            for (std::size_t k = 0; k < sp.points.size(); ++k) {
                const double t_ms = static_cast<double>(k) * 1000.0 / kCanonicalHz;
                const double px = cfg.geometry.width_px / 2.0 +
                                  std::tan(sp.points[k].x * kDegToRad) * d / mmppx_x;
                const double py = cfg.geometry.height_px / 2.0 +
                                  std::tan(sp.points[k].y * kDegToRad) * d / mmppx_y;
                body += format_double(t_ms) + "," + format_double(px) + "," + format_double(py) +
                        ",,,1\n";
            }
            w.write(body);
            w.commit();
        }
        {
            AtomicFileWriter w(join_path(dir, base + "_labels.csv"));
            std::string body = "index,label\n";
            for (std::size_t k = 0; k < corpus[i].labels.size(); ++k)
                body += std::to_string(k) + "," + std::to_string(int(corpus[i].labels[k])) + "\n";
            w.write(body);
            w.commit();
        }
        mani.entries.emplace_back("file", base + ".csv, " + sp.participant_id + ", " +
                                              sp.stimulus_id);
        mani.entries.emplace_back("labels", base + "_labels.csv, " + base + ".csv");
    }
    for (int p = 0; p < cfg.n_participants; ++p)
        mani.entries.emplace_back("participant_label",
                                  "p" + std::to_string(p) + ", " +
                                      std::to_string(cfg.participant_group(p)));
    write_kv_file(join_path(dir, "manifest.txt"), mani);
}

// ---------------------------------------------------------------------------
// embedding store
// ---------------------------------------------------------------------------

void EmbeddingStore::append(EmbeddingRecord rec) {
    if (records.empty() && dim == 0) dim = static_cast<int>(rec.values.size());
    if (static_cast<int>(rec.values.size()) != dim)
        throw DataError("embedding store: dimension mismatch (store " + std::to_string(dim) +
                        ", record " + std::to_string(rec.values.size()) + ")");
    records.push_back(std::move(rec));
}

namespace {

void put_u32le(std::string& out, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.append(b, 4);
}

std::uint32_t get_u32le(const std::string& s, std::size_t& pos) {
    if (pos + 4 > s.size()) throw DataError("embedding store truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(s.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void save_embeddings(const EmbeddingStore& store, const std::string& path) {
    std::string blob = "obf-embedding-store v1 dim=" + std::to_string(store.dim) +
                       " count=" + std::to_string(store.records.size()) +
                       " model=" + (store.model_checksum.empty() ? "-" : store.model_checksum) +
                       "\n";
    for (const auto& rec : store.records) {
        put_u32le(blob, static_cast<std::uint32_t>(rec.participant_id.size()));
        blob.append(rec.participant_id);
        put_u32le(blob, static_cast<std::uint32_t>(rec.stimulus_id.size()));
        blob.append(rec.stimulus_id);
        for (float f : rec.values) {
            char b[4];
            std::memcpy(b, &f, 4);
            blob.append(b, 4);
        }
    }
    AtomicFileWriter w(path);
    w.write(blob);
    w.commit();
}

EmbeddingStore load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open embedding store '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string blob = ss.str();

    const std::size_t nl = blob.find('\n');
    if (nl == std::string::npos) throw DataError("embedding store '" + path + "': no header");
    const std::string header = blob.substr(0, nl);
    EmbeddingStore store;
    std::size_t count = 0;
    {
        std::istringstream hs(header);
        std::string magic, version, field;
        hs >> magic >> version;
        if (magic != "obf-embedding-store" || version != "v1")
            throw DataError("'" + path + "' is not an embedding store");
        while (hs >> field) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
            if (key == "dim") store.dim = static_cast<int>(parse_long_field("dim", value));
            if (key == "count") count = static_cast<std::size_t>(parse_long_field("count", value));
            if (key == "model" && value != "-") store.model_checksum = value;
        }
    }
    if (store.dim < 0) throw DataError("embedding store '" + path + "': bad dim");

    std::size_t pos = nl + 1;
    for (std::size_t r = 0; r < count; ++r) {
        EmbeddingRecord rec;
        const std::uint32_t plen = get_u32le(blob, pos);
        if (pos + plen > blob.size()) throw DataError("embedding store truncated");
        rec.participant_id.assign(blob, pos, plen);
        pos += plen;
        const std::uint32_t slen = get_u32le(blob, pos);
        if (pos + slen > blob.size()) throw DataError("embedding store truncated");
        rec.stimulus_id.assign(blob, pos, slen);
        pos += slen;
        if (pos + 4 * static_cast<std::size_t>(store.dim) > blob.size())
            throw DataError("embedding store truncated (dim mismatch?)");
        rec.values.resize(static_cast<std::size_t>(store.dim));
        for (int k = 0; k < store.dim; ++k) {
            std::memcpy(&rec.values[static_cast<std::size_t>(k)], blob.data() + pos, 4);
            pos += 4;
        }
        store.records.push_back(std::move(rec));
    }
    if (pos != blob.size())
        throw DataError("embedding store '" + path + "': trailing bytes (count mismatch)");
    return store;
}

std::string file_checksum_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::uint64_t h = fnv1a64(ss.str());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// configuration parsing
// ---------------------------------------------------------------------------

namespace {

Range parse_range_field(const std::string& key, const std::string& value) {
    std::istringstream ss(trim(value));
    double lo, hi;
    if (!(ss >> lo)) throw DataError("key '" + key + "': expected 'lo hi' or one number");
    if (!(ss >> hi)) hi = lo;
    std::string rest;
    if (ss >> rest) throw DataError("key '" + key + "': trailing content '" + rest + "'");
    if (lo > hi) throw DataError("key '" + key + "': range is not well-ordered");
    return Range{lo, hi};
}

}  // namespace

FullConfig parse_config_text(const std::string& text, const std::string& origin) {
    const KvFile kv = parse_kv_text(text, origin);
    FullConfig cfg;

    std::map<std::string, bool> seen;
    for (const auto& [key, value] : kv.entries) {
        if (seen.count(key)) throw DataError(origin + ": duplicate key '" + key + "'");
        seen[key] = true;

        if (key == "model.backbone") cfg.model.backbone = backbone_from_name(value);
        else if (key == "model.n_layers") cfg.model.n_layers = static_cast<int>(parse_long_field(key, value));
        else if (key == "model.hidden") cfg.model.hidden = static_cast<int>(parse_long_field(key, value));
        else if (key == "model.use_conv") cfg.model.use_conv = parse_bool_field(key, value);
        else if (key == "model.conv_kernel") cfg.model.conv_kernel = static_cast<int>(parse_long_field(key, value));
        else if (key == "model.conv_channels") cfg.model.conv_channels = static_cast<int>(parse_long_field(key, value));
        else if (key == "model.pool") cfg.model.pool = static_cast<int>(parse_long_field(key, value));
        else if (key == "model.cl_hidden") cfg.model.cl_hidden = static_cast<int>(parse_long_field(key, value));
        else if (key == "model.tf_heads") cfg.model.tf_heads = static_cast<int>(parse_long_field(key, value));
        else if (key == "model.tf_ff_factor") cfg.model.tf_ff_factor = static_cast<int>(parse_long_field(key, value));
        else if (key == "pretrain.epochs") cfg.pretrain.epochs = static_cast<int>(parse_long_field(key, value));
        else if (key == "pretrain.lr") cfg.pretrain.lr = parse_double_field(key, value);
        else if (key == "pretrain.lr_halving_every") cfg.pretrain.lr_halving_every = static_cast<int>(parse_long_field(key, value));
        else if (key == "pretrain.grad_clip") cfg.pretrain.grad_clip = parse_double_field(key, value);
        else if (key == "pretrain.batch") cfg.pretrain.batch = static_cast<int>(parse_long_field(key, value));
        else if (key == "pretrain.w_rc") cfg.pretrain.w_rc = parse_double_field(key, value);
        else if (key == "pretrain.w_pc") cfg.pretrain.w_pc = parse_double_field(key, value);
        else if (key == "pretrain.w_fi") cfg.pretrain.w_fi = parse_double_field(key, value);
        else if (key == "pretrain.w_cl") cfg.pretrain.w_cl = parse_double_field(key, value);
        else if (key == "pretrain.input_len_s") cfg.pretrain.input_len_s = parse_range_field(key, value);
        else if (key == "pretrain.pc_horizon_ms") cfg.pretrain.pc_horizon_ms = parse_double_field(key, value);
        else if (key == "pretrain.cl_frac") cfg.pretrain.cl_frac = parse_range_field(key, value);
        else if (key == "pretrain.train_frac") cfg.pretrain.train_frac = parse_double_field(key, value);
        else if (key == "pretrain.seed") cfg.pretrain.seed = static_cast<std::uint64_t>(parse_long_field(key, value));
        else if (key == "pretrain.threads") cfg.pretrain.threads = static_cast<int>(parse_long_field(key, value));
        else if (key == "augment.enabled") cfg.pretrain.augment_enabled = parse_bool_field(key, value);
        else if (key == "augment.offset_deg") cfg.pretrain.augment.offset_deg = parse_range_field(key, value);
        else if (key == "augment.scale") cfg.pretrain.augment.scale = parse_range_field(key, value);
        else if (key == "augment.rotation_rad") cfg.pretrain.augment.rotation_rad = parse_range_field(key, value);
        else if (key == "augment.shear") cfg.pretrain.augment.shear = parse_range_field(key, value);
        else if (key == "augment.point_noise_sd_deg") cfg.pretrain.augment.point_noise_sd_deg = parse_double_field(key, value);
        else if (key == "augment.point_noise_prob") cfg.pretrain.augment.point_noise_prob = parse_double_field(key, value);
        else throw DataError(origin + ": unknown key '" + key + "'");
    }
    cfg.model.validate();
    cfg.pretrain.validate();
    return cfg;
}

FullConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

SynthConfig parse_synth_config(const std::string& path) {
    const KvFile kv = read_kv_file(path);
    SynthConfig cfg;
    std::map<std::string, bool> seen;
    for (const auto& [key, value] : kv.entries) {
        if (seen.count(key)) throw DataError(path + ": duplicate key '" + key + "'");
        seen[key] = true;

        if (key == "synth.n_participants") cfg.n_participants = static_cast<int>(parse_long_field(key, value));
        else if (key == "synth.n_stimuli") cfg.n_stimuli = static_cast<int>(parse_long_field(key, value));
        else if (key == "synth.scanpaths_per_pair") cfg.scanpaths_per_pair = static_cast<int>(parse_long_field(key, value));
        else if (key == "synth.duration_s") cfg.duration_s = parse_double_field(key, value);
        else if (key == "synth.fix_dur_ms") cfg.fix_dur_ms = parse_range_field(key, value);
        else if (key == "synth.sac_dur_ms") cfg.sac_dur_ms = parse_range_field(key, value);
        else if (key == "synth.sac_amp_deg") cfg.sac_amp_deg = parse_range_field(key, value);
        else if (key == "synth.fix_jitter_sd_deg") cfg.fix_jitter_sd_deg = parse_double_field(key, value);
        else if (key == "synth.clusters_per_stimulus") cfg.clusters_per_stimulus = static_cast<int>(parse_long_field(key, value));
        else if (key == "synth.layout_patch_frac") cfg.layout_patch_frac = parse_double_field(key, value);
        else if (key == "synth.participant_jitter_scale") cfg.participant_jitter_scale = parse_range_field(key, value);
        else if (key == "synth.participant_dwell_bias") cfg.participant_dwell_bias = parse_range_field(key, value);
        else if (key == "synth.group_dwell_ratio") cfg.group_dwell_ratio = parse_double_field(key, value);
        else if (key == "synth.layout_seed") cfg.layout_seed = static_cast<std::uint64_t>(parse_long_field(key, value));
        else if (key == "synth.seed") cfg.seed = static_cast<std::uint64_t>(parse_long_field(key, value));
        else if (key == "synth.source_tag") cfg.source_tag = value;
        else if (key == "synth.width_px") cfg.geometry.width_px = parse_double_field(key, value);
        else if (key == "synth.height_px") cfg.geometry.height_px = parse_double_field(key, value);
        else if (key == "synth.width_mm") cfg.geometry.width_mm = parse_double_field(key, value);
        else if (key == "synth.height_mm") cfg.geometry.height_mm = parse_double_field(key, value);
        else if (key == "synth.viewing_distance_mm") cfg.geometry.viewing_distance_mm = parse_double_field(key, value);
        else throw DataError(path + ": unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

}  // namespace obf
