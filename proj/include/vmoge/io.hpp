#pragma once

#include <array>
#include <bit>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmoge/common.hpp"
#include "vmoge/graphprior.hpp"
#include "vmoge/signal.hpp"

namespace vmoge {

struct RawRecording {
    std::string subject;
    int label = 0;
    double fs = 0.0;
    std::optional<double> age;
    std::optional<double> score;
    Mat data;  // C x T
};

namespace detail_io {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s, const std::string& what) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("could not parse " + what + " value '" + s + "'");
    }
}

inline std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    for (;;) {
        size_t at = line.find(sep, start);
        if (at == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, at - start));
        start = at + 1;
    }
}

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_f64(std::string& out, double v) {
    uint64_t bits = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf_[at_ + i])) << (8 * i);
        at_ += 4;
        return v;
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf_[at_++]);
    }
    double f64() {
        need(8);
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf_[at_ + i])) << (8 * i);
        at_ += 8;
        return std::bit_cast<double>(bits);
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf_.substr(at_, n);
        at_ += n;
        return s;
    }
    size_t remaining() const { return buf_.size() - at_; }

private:
    void need(size_t n) const {
        if (at_ + n > buf_.size())
            throw ValidationError(what_ + ": truncated (wanted " + std::to_string(n) +
                                  " bytes at offset " + std::to_string(at_) + ")");
    }
    const std::string& buf_;
    std::string what_;
    size_t at_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw ValidationError("short write to '" + path + "'");
}

}  // namespace detail_io

// Raw recording CSV: a key=value header line (fs, subject, label, optional
// age and score), then one row per time sample with one column per channel.
inline void write_raw_csv(const std::string& path, const RawRecording& rec) {
    using namespace detail_io;
    std::string out;
    out += "fs=" + format_double(rec.fs) + ",subject=" + rec.subject +
           ",label=" + std::to_string(rec.label);
    if (rec.age) out += ",age=" + format_double(*rec.age);
    if (rec.score) out += ",score=" + format_double(*rec.score);
    out += "\n";
    int C = rec.data.rows();
    int T = rec.data.cols();
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            if (c) out += ",";
            out += format_double(rec.data(c, t));
        }
        out += "\n";
    }
    write_file(path, out);
}

inline RawRecording read_raw_csv(const std::string& path) {
    using namespace detail_io;
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    std::string header;
    if (!std::getline(in, header)) throw ValidationError(path + ": empty file");
    if (!header.empty() && header.back() == '\r') header.pop_back();

    RawRecording rec;
    bool has_fs = false, has_subject = false, has_label = false;
    for (const auto& field : split(header, ',')) {
        size_t eq = field.find('=');
        if (eq == std::string::npos)
            throw ValidationError(path + ": malformed header field '" + field + "'");
        std::string key = field.substr(0, eq);
        std::string val = field.substr(eq + 1);
        if (key == "fs") {
            rec.fs = parse_double(val, "fs");
            has_fs = true;
        } else if (key == "subject") {
            rec.subject = val;
            has_subject = true;
        } else if (key == "label") {
            if (val != "0" && val != "1")
                throw ValidationError(path + ": label must be 0 or 1, got '" + val + "'");
            rec.label = val == "1" ? 1 : 0;
            has_label = true;
        } else if (key == "age") {
            rec.age = parse_double(val, "age");
        } else if (key == "score") {
            rec.score = parse_double(val, "score");
        } else {
            throw ValidationError(path + ": unknown header key '" + key + "'");
        }
    }
    if (!has_fs || !has_subject || !has_label)
        throw ValidationError(path + ": header must carry fs, subject, and label");
    if (rec.fs <= 0.0) throw ValidationError(path + ": fs must be positive");

    std::vector<std::vector<double>> rows;
    std::string line;
    size_t cols = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split(line, ',');
        if (cols == 0)
            cols = fields.size();
        else if (fields.size() != cols)
            throw ValidationError(path + ": row " + std::to_string(rows.size() + 2) + " has " +
                                  std::to_string(fields.size()) + " columns, expected " +
                                  std::to_string(cols));
        std::vector<double> row(fields.size());
        for (size_t c = 0; c < fields.size(); ++c) {
            row[c] = parse_double(fields[c], "sample");
            if (!std::isfinite(row[c]))
                throw ValidationError(path + ": non-finite sample in row " +
                                      std::to_string(rows.size() + 2));
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ValidationError(path + ": no samples");

    int T = static_cast<int>(rows.size());
    int C = static_cast<int>(cols);
    rec.data = Mat(C, T);
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < C; ++c) rec.data(c, t) = rows[static_cast<size_t>(t)][static_cast<size_t>(c)];
    return rec;
}

// ---- feature container ------------------------------------------------------

enum class GraphScope { epoch, subject };

inline GraphScope graph_scope_from_string(const std::string& s) {
    if (s == "epoch") return GraphScope::epoch;
    if (s == "subject") return GraphScope::subject;
    throw ValidationError("unknown graph scope '" + s + "' (expected epoch or subject)");
}

inline const char* graph_scope_name(GraphScope s) {
    return s == GraphScope::epoch ? "epoch" : "subject";
}

struct SubjectInfo {
    std::string id;
    int label = 0;
    std::optional<double> age;
    std::optional<double> score;
};

struct EpochFeatures {
    uint32_t subject_index = 0;
    uint8_t label = 0;
    Mat rbp;                                   // 4 x C
    std::array<Mat, kNumBands> filtered;       // each C x T'
    std::array<Mat, kNumBands> adjacency;      // each C x C
};

struct FeatureSet {
    double fs = 0.0;
    double epoch_sec = 0.0;
    double density = 0.0;
    GraphScope scope = GraphScope::epoch;
    int channels = 0;
    int t_prime = 0;
    std::vector<SubjectInfo> subjects;
    std::vector<EpochFeatures> epochs;
};

struct FeaturizeOptions {
    double epoch_sec = 2.0;
    double density = 0.3;
    GraphScope scope = GraphScope::epoch;
    std::optional<double> expect_fs;  // validation only; no resampling
};

inline FeatureSet featurize(const std::vector<RawRecording>& recs, const FeaturizeOptions& opt) {
    if (recs.empty()) throw ValidationError("featurize: no recordings");
    double fs = recs[0].fs;
    int C = recs[0].data.rows();
    if (opt.expect_fs && *opt.expect_fs != fs)
        throw ValidationError("featurize: recordings sampled at " + std::to_string(fs) +
                              " Hz but --fs expected " + std::to_string(*opt.expect_fs));
    FeatureSet set;
    set.fs = fs;
    set.epoch_sec = opt.epoch_sec;
    set.density = opt.density;
    set.scope = opt.scope;
    set.channels = C;

    for (size_t r = 0; r < recs.size(); ++r) {
        const auto& rec = recs[r];
        if (rec.fs != fs)
            throw ValidationError("featurize: '" + rec.subject + "' sampled at " +
                                  std::to_string(rec.fs) + " Hz, others at " +
                                  std::to_string(fs));
        if (rec.data.rows() != C)
            throw ValidationError("featurize: '" + rec.subject + "' has " +
                                  std::to_string(rec.data.rows()) + " channels, others " +
                                  std::to_string(C));
        for (const auto& s : set.subjects)
            if (s.id == rec.subject)
                throw ValidationError("featurize: duplicate subject id '" + rec.subject + "'");
        set.subjects.push_back({rec.subject, rec.label, rec.age, rec.score});
    }

    // flatten (recording, epoch) pairs first so epochs can be built in parallel
    struct Slot {
        uint32_t subject_index;
        Mat epoch;
        std::array<Mat, kNumBands> subject_adjacency;  // used when scope == subject
    };
    std::vector<Slot> slots;
    for (size_t r = 0; r < recs.size(); ++r) {
        const auto& rec = recs[r];
        std::array<Mat, kNumBands> subj_adj;
        if (opt.scope == GraphScope::subject) {
            int T = rec.data.cols();
            for (int b = 0; b < kNumBands; ++b) {
                Mat filt(C, T);
                for (int c = 0; c < C; ++c) {
                    auto y = bandpass_filter(std::span<const double>(rec.data.row(c),
                                                                     static_cast<size_t>(T)),
                                             fs, kBands[static_cast<size_t>(b)].lo,
                                             kBands[static_cast<size_t>(b)].hi);
                    std::memcpy(filt.row(c), y.data(), sizeof(double) * y.size());
                }
                subj_adj[static_cast<size_t>(b)] = build_adjacency(filt, opt.density);
            }
        }
        for (auto& ep : epoch_split(rec.data, fs, opt.epoch_sec))
            slots.push_back({static_cast<uint32_t>(r), std::move(ep), subj_adj});
    }
    if (slots.empty()) throw ValidationError("featurize: no recording is long enough for one epoch");
    set.t_prime = slots[0].epoch.cols();

    set.epochs.resize(slots.size());
    parallel_for(static_cast<int>(slots.size()), [&](int idx) {
        size_t i = static_cast<size_t>(idx);
        const auto& slot = slots[i];
        EpochFeatures out;
        out.subject_index = slot.subject_index;
        out.label = static_cast<uint8_t>(set.subjects[slot.subject_index].label);
        out.rbp = relative_band_power(slot.epoch, fs);
        int tp = slot.epoch.cols();
        for (int b = 0; b < kNumBands; ++b) {
            Mat filt(C, tp);
            for (int c = 0; c < C; ++c) {
                auto y = bandpass_filter(
                    std::span<const double>(slot.epoch.row(c), static_cast<size_t>(tp)), fs,
                    kBands[static_cast<size_t>(b)].lo, kBands[static_cast<size_t>(b)].hi);
                std::memcpy(filt.row(c), y.data(), sizeof(double) * y.size());
            }
            out.adjacency[static_cast<size_t>(b)] =
                opt.scope == GraphScope::epoch ? build_adjacency(filt, opt.density)
                                               : slot.subject_adjacency[static_cast<size_t>(b)];
            out.filtered[static_cast<size_t>(b)] = std::move(filt);
        }
        set.epochs[i] = std::move(out);
    });
    return set;
}

inline constexpr char kContainerMagic[4] = {'V', 'M', 'G', 'E'};

inline nlohmann::json container_manifest(const FeatureSet& set) {
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& s : set.subjects) {
        nlohmann::json j{{"id", s.id}, {"label", s.label}};
        if (s.age) j["age"] = *s.age;
        if (s.score) j["score"] = *s.score;
        subjects.push_back(std::move(j));
    }
    return nlohmann::json{{"fs", set.fs},
                          {"epoch_sec", set.epoch_sec},
                          {"density", set.density},
                          {"graph_scope", graph_scope_name(set.scope)},
                          {"channels", set.channels},
                          {"t_prime", set.t_prime},
                          {"subjects", std::move(subjects)}};
}

inline void write_container(const std::string& path, const FeatureSet& set) {
    using namespace detail_io;
    std::string out;
    out.append(kContainerMagic, 4);
    put_u32(out, 1);  // version
    put_u32(out, static_cast<uint32_t>(set.subjects.size()));
    put_u32(out, static_cast<uint32_t>(set.epochs.size()));
    put_u32(out, static_cast<uint32_t>(kNumBands));
    put_u32(out, static_cast<uint32_t>(set.channels));
    put_u32(out, static_cast<uint32_t>(kNumBands));  // rbp rows per channel block
    put_u32(out, static_cast<uint32_t>(set.t_prime));

    int C = set.channels;
    int tp = set.t_prime;
    for (const auto& ep : set.epochs) {
        put_u32(out, ep.subject_index);
        put_u8(out, ep.label);
        for (int b = 0; b < kNumBands; ++b)
            for (int c = 0; c < C; ++c) put_f64(out, ep.rbp(b, c));
        for (int b = 0; b < kNumBands; ++b)
            for (int c = 0; c < C; ++c)
                for (int t = 0; t < tp; ++t)
                    put_f64(out, ep.filtered[static_cast<size_t>(b)](c, t));
        for (int b = 0; b < kNumBands; ++b)
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < C; ++j)
                    put_f64(out, ep.adjacency[static_cast<size_t>(b)](i, j));
    }

    std::string manifest = container_manifest(set).dump();
    put_u32(out, static_cast<uint32_t>(manifest.size()));
    out += manifest;
    write_file(path, out);
}

inline FeatureSet read_container(const std::string& path) {
    using namespace detail_io;
    std::string buf = read_file(path);
    Reader rd(buf, path);
    std::string magic = rd.bytes(4);
    if (std::memcmp(magic.data(), kContainerMagic, 4) != 0)
        throw ValidationError(path + ": not a feature container (bad magic)");
    uint32_t version = rd.u32();
    if (version != 1)
        throw ValidationError(path + ": unsupported container version " +
                              std::to_string(version));
    uint32_t n_subjects = rd.u32();
    uint32_t n_epochs = rd.u32();
    uint32_t bands = rd.u32();
    uint32_t C = rd.u32();
    uint32_t d_rbp = rd.u32();
    uint32_t tp = rd.u32();
    if (bands != kNumBands || d_rbp != kNumBands)
        throw ValidationError(path + ": expected " + std::to_string(kNumBands) +
                              " bands, header says " + std::to_string(bands) + "/" +
                              std::to_string(d_rbp));

    FeatureSet set;
    set.channels = static_cast<int>(C);
    set.t_prime = static_cast<int>(tp);
    set.epochs.resize(n_epochs);
    for (uint32_t e = 0; e < n_epochs; ++e) {
        EpochFeatures& ep = set.epochs[e];
        ep.subject_index = rd.u32();
        if (ep.subject_index >= n_subjects)
            throw ValidationError(path + ": epoch " + std::to_string(e) +
                                  " references subject " + std::to_string(ep.subject_index) +
                                  " of " + std::to_string(n_subjects));
        ep.label = rd.u8();
        ep.rbp = Mat(kNumBands, static_cast<int>(C));
        for (int b = 0; b < kNumBands; ++b)
            for (uint32_t c = 0; c < C; ++c) ep.rbp(b, static_cast<int>(c)) = rd.f64();
        for (int b = 0; b < kNumBands; ++b) {
            Mat filt(static_cast<int>(C), static_cast<int>(tp));
            for (uint32_t c = 0; c < C; ++c)
                for (uint32_t t = 0; t < tp; ++t)
                    filt(static_cast<int>(c), static_cast<int>(t)) = rd.f64();
            ep.filtered[static_cast<size_t>(b)] = std::move(filt);
        }
        for (int b = 0; b < kNumBands; ++b) {
            Mat adj(static_cast<int>(C), static_cast<int>(C));
            for (uint32_t i = 0; i < C; ++i)
                for (uint32_t j = 0; j < C; ++j)
                    adj(static_cast<int>(i), static_cast<int>(j)) = rd.f64();
            ep.adjacency[static_cast<size_t>(b)] = std::move(adj);
        }
    }

    uint32_t mlen = rd.u32();
    std::string manifest_text = rd.bytes(mlen);
    if (rd.remaining() != 0)
        throw ValidationError(path + ": trailing bytes after manifest");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(manifest_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(path + ": bad manifest JSON: " + e.what());
    }
    set.fs = m.at("fs").get<double>();
    set.epoch_sec = m.at("epoch_sec").get<double>();
    set.density = m.at("density").get<double>();
    set.scope = graph_scope_from_string(m.at("graph_scope").get<std::string>());
    if (m.at("channels").get<int>() != set.channels || m.at("t_prime").get<int>() != set.t_prime)
        throw ValidationError(path + ": manifest dimensions disagree with header");
    for (const auto& j : m.at("subjects")) {
        SubjectInfo s;
        s.id = j.at("id").get<std::string>();
        s.label = j.at("label").get<int>();
        if (j.contains("age")) s.age = j.at("age").get<double>();
        if (j.contains("score")) s.score = j.at("score").get<double>();
        set.subjects.push_back(std::move(s));
    }
    if (set.subjects.size() != n_subjects)
        throw ValidationError(path + ": manifest lists " + std::to_string(set.subjects.size()) +
                              " subjects, header says " + std::to_string(n_subjects));
    return set;
}

}  // namespace vmoge
