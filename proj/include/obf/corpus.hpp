// Dataset loading, the synthetic scanpath generator used as the oracle
// corpus, embedding persistence, and configuration parsing.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "obf/fixation.hpp"
#include "obf/gaze.hpp"
#include "obf/pretrain.hpp"
#include "obf/rng.hpp"

namespace obf {

// ---------------------------------------------------------------------------
// manifests and corpora
// ---------------------------------------------------------------------------
// A dataset directory holds `manifest.txt` (line-oriented `key = value`)
// plus one CSV per recording. Raw manifests carry the screen geometry and
// native rate; canonical manifests carry the screen half-extent in visual
// degrees. Roster lines:
//   file = <csv>, <participant_id>, <stimulus_id>
//   labels = <labels_csv>, <csv>              (optional ground truth)
//   participant_label = <participant_id>, <0|1>   (optional binary class)

struct DatasetManifest {
    std::string source_tag;
    double native_hz = 0.0;
    bool canonical = false;
    ScreenGeometry geometry;       // raw manifests
    Vec2 halfextent_deg{0, 0};     // canonical manifests

    struct FileEntry {
        std::string file;
        std::string participant_id;
        std::string stimulus_id;
    };
    std::vector<FileEntry> files;
    std::map<std::string, std::string> label_files;       // recording csv -> labels csv
    std::map<std::string, int> participant_labels;
};

DatasetManifest read_manifest(const std::string& dir);

struct LoadReport {
    struct Issue {
        std::string file;
        long line = 0;  // 0 = file-level
        std::string what;
    };
    std::vector<Issue> issues;
    std::size_t rows_parsed = 0;
    std::size_t rows_rejected = 0;
    std::vector<std::string> skipped_files;
};

/// Parses every roster file. Malformed rows are rejected and reported;
/// files with non-monotone timestamps are skipped whole. parsed+rejected
/// always equals the number of data rows seen.
std::vector<RawRecording> load_raw_corpus(const std::string& dir, LoadReport* report = nullptr);

std::vector<Scanpath> load_canonical_corpus(const std::string& dir,
                                            DatasetManifest* manifest_out = nullptr);

/// Ground-truth fixation labels for a recording file, when present.
FixationLabels load_labels_csv(const std::string& path);

// ---------------------------------------------------------------------------
// synthetic oracle corpus
// ---------------------------------------------------------------------------

struct SynthConfig {
    int n_participants = 10;
    int n_stimuli = 10;
    int scanpaths_per_pair = 1;
    double duration_s = 11.0;  // minimum; generation stops at a phase boundary
    Range fix_dur_ms{250.0, 600.0};
    Range sac_dur_ms{33.0, 83.0};
    Range sac_amp_deg{5.0, 15.0};
    double fix_jitter_sd_deg = 0.08;
    int clusters_per_stimulus = 5;
    /// Fraction of the usable screen each stimulus layout occupies; below
    /// 1.0 the clusters concentrate in a stimulus-specific patch, which
    /// makes stimulus identity strongly position-coded.
    double layout_patch_frac = 1.0;
    Range participant_jitter_scale{0.6, 1.4};
    Range participant_dwell_bias{0.8, 1.2};
    /// Dwell-duration multiplier for group-1 participants (second half of
    /// the roster); 1.0 makes the two groups statistically identical.
    double group_dwell_ratio = 1.0;
    std::uint64_t layout_seed = 7;
    std::uint64_t seed = 1;
    ScreenGeometry geometry{1920, 1080, 480, 270, 650};
    std::string source_tag = "synth";

    void validate() const;
    int participant_group(int participant) const {
        return participant >= n_participants / 2 ? 1 : 0;
    }
};

struct SynthScanpath {
    Scanpath scanpath;
    FixationLabels labels;  // exact phase ground truth
};

/// Alternating fixation phases (cluster center + participant jitter, at
/// least 200 ms) and linear saccade sweeps faster than 100 deg/s by
/// construction. Stimulus identity fixes the cluster layout; participant
/// identity scales jitter and dwell.
SynthScanpath synth_scanpath(const SynthConfig& cfg, int participant, int stimulus, Rng& rng);

/// Writes a raw-format corpus (recordings + ground-truth labels +
/// manifest + participant labels) that preprocess() maps back onto the
/// generated degree-space scanpaths.
void write_synth_corpus(const SynthConfig& cfg, const std::string& dir);

/// In-memory corpus of already-canonical scanpaths (for tests/oracles).
std::vector<SynthScanpath> make_synth_corpus(const SynthConfig& cfg);

void write_canonical_corpus(const std::string& dir, const std::vector<Scanpath>& scanpaths,
                            const std::map<std::string, int>& participant_labels,
                            const std::string& source_tag, const Vec2& halfextent_deg);

// ---------------------------------------------------------------------------
// embedding store
// ---------------------------------------------------------------------------
// Text header line, then binary records (little-endian): u32 id lengths +
// bytes for participant/stimulus, then dim float32 values.

struct EmbeddingRecord {
    std::string participant_id;
    std::string stimulus_id;
    std::vector<float> values;
};

struct EmbeddingStore {
    int dim = 0;
    std::string model_checksum;  // hex; fnv1a64 of the checkpoint file
    std::vector<EmbeddingRecord> records;

    void append(EmbeddingRecord rec);  // rejects mixed dims
};

void save_embeddings(const EmbeddingStore& store, const std::string& path);
EmbeddingStore load_embeddings(const std::string& path);

std::string file_checksum_hex(const std::string& path);

// ---------------------------------------------------------------------------
// configuration files
// ---------------------------------------------------------------------------
// `key = value` with dotted sections mirroring the config structs. Unknown
// keys are rejected; absent keys take the published defaults. Range fields
// take "lo hi" (or one value for a degenerate range).

struct FullConfig {
    ModelConfig model;
    PretrainConfig pretrain;
};

FullConfig parse_config(const std::string& path);
FullConfig parse_config_text(const std::string& text, const std::string& origin);
SynthConfig parse_synth_config(const std::string& path);

}  // namespace obf
