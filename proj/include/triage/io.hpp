#pragma once

// Persistence: checkpoints, score tables, metadata and loss traces. Parsers
// fail closed; nothing is repaired or coerced. Schemas are documented in docs/.

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "triage/error.hpp"
#include "triage/metadata.hpp"
#include "triage/micronet.hpp"
#include "triage/scoring.hpp"
#include "triage/synthcorpus.hpp"
#include "triage/twostage.hpp"

namespace triage::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Version written into every JSON artifact; readers accept exactly this.
inline constexpr int kFormatVersion = 1;

// ---- files, digests, encodings ------------------------------------------------

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::NotFound, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    require(!in.bad(), ErrorCode::Io, "read failed: " + path.string());
    return std::move(ss).str();
}

/// Writes through a temporary sibling and renames it into place.
inline void write_file(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorCode::Io, "cannot write " + path.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(out.good(), ErrorCode::Io, "write failed: " + path.string());
    }
    fs::rename(tmp, path);
}

inline std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    require(EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) == 1, ErrorCode::Io,
            "sha256 failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 15]);
    }
    return out;
}

inline std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::string base64_decode(std::string_view text, const std::string& what) {
    require(text.size() % 4 == 0, ErrorCode::Malformed, what + ": base64 length is not a multiple of 4");
    for (char c : text)
        require(std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '/' || c == '=', ErrorCode::Malformed,
                what + ": invalid base64 character");
    std::string out(3 * (text.size() / 4), '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    require(n >= 0, ErrorCode::Malformed, what + ": invalid base64");
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

/// Little-endian IEEE-754 binary32, independent of host byte order.
inline std::string encode_floats(std::span<const float> values) {
    std::string out(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, &values[i], 4);
        for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xFF);
    }
    return out;
}

inline std::vector<float> decode_floats(std::string_view bytes, std::size_t count, const std::string& what) {
    require(bytes.size() >= count * 4, ErrorCode::Truncated,
            what + ": expected " + std::to_string(count * 4) + " bytes, got " + std::to_string(bytes.size()));
    require(bytes.size() == count * 4, ErrorCode::Malformed,
            what + ": expected " + std::to_string(count * 4) + " bytes, got " + std::to_string(bytes.size()));
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
        std::memcpy(&out[i], &u, 4);
        require(std::isfinite(out[i]), ErrorCode::NonFinite, what + ": non-finite value at index " + std::to_string(i));
    }
    return out;
}

// ---- JSON helpers -------------------------------------------------------------

/// Parse errors at the end of input are reported as truncation.
inline json parse_json(const std::string& text, const std::string& what) {
    require(!text.empty(), ErrorCode::Truncated, what + " is empty");
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const bool at_end = e.byte >= text.size();
        fail(at_end ? ErrorCode::Truncated : ErrorCode::Malformed, what + ": " + e.what());
    }
}

inline void check_format_version(const json& j, const std::string& what) {
    require(j.is_object() && j.contains("format_version") && j["format_version"].is_number_integer(),
            ErrorCode::Schema, what + " has no integer format_version");
    const auto v = j["format_version"].get<long long>();
    require(v == kFormatVersion, ErrorCode::VersionMismatch,
            what + " has format_version " + std::to_string(v) + "; this build reads version " +
                std::to_string(kFormatVersion) + " only");
}

/// Typed field access with a diagnostic naming the field; `code` classifies failures.
template <typename T>
T get_field(const json& j, const std::string& key, const std::string& what, ErrorCode code = ErrorCode::Schema) {
    require(j.is_object() && j.contains(key), code, what + " is missing field '" + key + "'");
    if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
        require(j.at(key).is_number_unsigned(), code, what + " field '" + key + "' must be a non-negative integer");
    if constexpr (std::is_floating_point_v<T>)
        require(j.at(key).is_number(), code, what + " field '" + key + "' must be a number");
    if constexpr (std::is_same_v<T, bool>)
        require(j.at(key).is_boolean(), code, what + " field '" + key + "' must be true or false");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(code, what + " field '" + key + "' has the wrong type");
    }
}

inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& what,
                                ErrorCode code = ErrorCode::Schema) {
    require(j.is_object(), code, what + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        require(std::find(allowed.begin(), allowed.end(), key) != allowed.end(), code,
                what + " has unknown field '" + key + "'");
}

// ---- network spec and checkpoints ---------------------------------------------

inline json spec_to_json(const micronet::NetworkSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers) {
        json o{{"kind", micronet::to_string(l.kind)}};
        switch (l.kind) {
            case micronet::LayerKind::Conv2d:
                o["in_channels"] = l.in_channels;
                o["out_channels"] = l.out_channels;
                [[fallthrough]];
            case micronet::LayerKind::MaxPool2d:
                o["kernel"] = l.kernel;
                o["stride"] = l.stride;
                o["padding"] = micronet::to_string(l.padding);
                break;
            case micronet::LayerKind::Dense:
                o["in_units"] = l.in_units;
                o["out_units"] = l.out_units;
                break;
            default: break;
        }
        layers.push_back(std::move(o));
    }
    return json{{"input_channels", spec.input_channels}, {"layers", std::move(layers)}};
}

inline micronet::NetworkSpec spec_from_json(const json& j, ErrorCode code = ErrorCode::Schema) {
    using micronet::LayerKind;
    reject_unknown_keys(j, {"input_channels", "layers"}, "network spec", code);
    micronet::NetworkSpec spec;
    spec.input_channels = get_field<std::size_t>(j, "input_channels", "network spec", code);
    const auto& layers = j.at("layers");
    require(layers.is_array(), code, "network spec 'layers' must be an array");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& o = layers[i];
        const std::string what = "layer " + std::to_string(i);
        micronet::LayerSpec l;
        try {
            l.kind = micronet::layer_kind_from_string(get_field<std::string>(o, "kind", what, code));
        } catch (const Error& e) {
            fail(code, what + ": " + e.what());
        }
        switch (l.kind) {
            case LayerKind::Conv2d:
                reject_unknown_keys(o, {"kind", "in_channels", "out_channels", "kernel", "stride", "padding"}, what, code);
                l.in_channels = get_field<std::size_t>(o, "in_channels", what, code);
                l.out_channels = get_field<std::size_t>(o, "out_channels", what, code);
                [[fallthrough]];
            case LayerKind::MaxPool2d:
                if (l.kind == LayerKind::MaxPool2d)
                    reject_unknown_keys(o, {"kind", "kernel", "stride", "padding"}, what, code);
                l.kernel = get_field<std::size_t>(o, "kernel", what, code);
                l.stride = get_field<std::size_t>(o, "stride", what, code);
                try {
                    l.padding = micronet::padding_from_string(get_field<std::string>(o, "padding", what, code));
                } catch (const Error& e) {
                    fail(code, what + ": " + e.what());
                }
                break;
            case LayerKind::Dense:
                reject_unknown_keys(o, {"kind", "in_units", "out_units"}, what, code);
                l.in_units = get_field<std::size_t>(o, "in_units", what, code);
                l.out_units = get_field<std::size_t>(o, "out_units", what, code);
                break;
            default: reject_unknown_keys(o, {"kind"}, what, code);
        }
        spec.layers.push_back(l);
    }
    try {
        micronet::validate(spec);
    } catch (const Error& e) {
        fail(code, e.what());
    }
    return spec;
}

enum class ModelKind { Patch, FullImage };

inline std::string to_string(ModelKind k) { return k == ModelKind::Patch ? "patch" : "full_image"; }

/// Everything a checkpoint holds. `input_size` is the patch size for patch
/// models and the minimum input size for full-image models.
struct Checkpoint {
    ModelKind kind = ModelKind::Patch;
    micronet::NetworkSpec spec;
    micronet::Parameters params;
    std::uint64_t seed = 0;
    std::size_t input_size = 0;
};

inline Checkpoint checkpoint_of(const twostage::PatchModel& m) {
    return {ModelKind::Patch, m.spec, m.params, m.seed, m.patch_size};
}
inline Checkpoint checkpoint_of(const twostage::FullImageModel& m) {
    return {ModelKind::FullImage, m.spec, m.params, m.seed, m.min_input_size};
}

/// Compact JSON; `digest` is the sha256 of the compact dump of every other field.
inline std::string checkpoint_to_string(const Checkpoint& c) {
    json params = json::object();
    for (const auto& [name, t] : c.params)
        params[name] = json{{"shape", t.shape()}, {"data_b64", base64_encode(encode_floats(t.data()))}};
    json j{{"format_version", kFormatVersion}, {"model_kind", to_string(c.kind)}, {"input_size", c.input_size},
           {"seed", c.seed}, {"spec", spec_to_json(c.spec)}, {"params", std::move(params)}};
    j["digest"] = sha256_hex(j.dump());
    return j.dump() + "\n";
}

inline Checkpoint checkpoint_from_string(const std::string& text, const std::string& what) {
    json j = parse_json(text, what);
    check_format_version(j, what);
    const auto digest = get_field<std::string>(j, "digest", what);
    j.erase("digest");
    require(sha256_hex(j.dump()) == digest, ErrorCode::DigestMismatch,
            what + ": content digest does not match; the file is corrupt or was edited");
    reject_unknown_keys(j, {"format_version", "model_kind", "input_size", "seed", "spec", "params"}, what);
    Checkpoint c;
    const auto kind = get_field<std::string>(j, "model_kind", what);
    require(kind == "patch" || kind == "full_image", ErrorCode::Schema, what + ": unknown model_kind '" + kind + "'");
    c.kind = kind == "patch" ? ModelKind::Patch : ModelKind::FullImage;
    c.input_size = get_field<std::size_t>(j, "input_size", what);
    c.seed = get_field<std::uint64_t>(j, "seed", what);
    c.spec = spec_from_json(j.at("spec"));
    const auto expected = micronet::init_parameters(c.spec, 0);
    const auto& params = j.at("params");
    require(params.is_object() && params.size() == expected.size(), ErrorCode::Schema,
            what + ": parameter set does not match the spec");
    for (const auto& [name, proto] : expected) {
        require(params.contains(name), ErrorCode::Schema, what + ": missing parameter " + name);
        const auto& p = params.at(name);
        reject_unknown_keys(p, {"shape", "data_b64"}, what + " parameter " + name);
        const auto shape = get_field<Shape>(p, "shape", what + " parameter " + name);
        require(shape == proto.shape(), ErrorCode::Schema,
                what + ": parameter " + name + " has shape " + shape_string(shape) + ", spec implies " +
                    shape_string(proto.shape()));
        const auto bytes = base64_decode(get_field<std::string>(p, "data_b64", what), what + " parameter " + name);
        c.params.emplace(name, Tensor(shape, decode_floats(bytes, shape_size(shape), what + " parameter " + name)));
    }
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const fs::path& path) { write_file(path, checkpoint_to_string(c)); }

inline Checkpoint load_checkpoint(const fs::path& path) {
    return checkpoint_from_string(read_file(path), "checkpoint " + path.string());
}

inline twostage::PatchModel load_patch_model(const fs::path& path) {
    auto c = load_checkpoint(path);
    require(c.kind == ModelKind::Patch, ErrorCode::Schema, path.string() + " is not a patch-model checkpoint");
    twostage::check_classifier_head(c.spec);
    return {std::move(c.spec), std::move(c.params), c.input_size, c.seed};
}

inline twostage::FullImageModel load_full_image_model(const fs::path& path) {
    auto c = load_checkpoint(path);
    require(c.kind == ModelKind::FullImage, ErrorCode::Schema, path.string() + " is not a full-image checkpoint");
    twostage::check_classifier_head(c.spec);
    require(c.input_size == micronet::min_input_size(c.spec), ErrorCode::Schema,
            path.string() + ": input_size disagrees with the spec's minimum input size");
    return {std::move(c.spec), std::move(c.params), c.input_size, c.seed};
}

// ---- CSV ---------------------------------------------------------------------

inline bool is_identifier(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
    });
}

inline void require_identifier(std::string_view s, const std::string& what) {
    require(is_identifier(s), ErrorCode::Malformed,
            what + " '" + std::string(s) + "' must be non-empty and use only [A-Za-z0-9_-]");
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line;  // 1-based source line of each row

    std::size_t column(const std::string& name) const {
        return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
    }
    bool has(const std::string& name) const { return column(name) < header.size(); }
};

/// Comma-separated, LF line endings, no quoting. A final newline is optional;
/// blank lines, carriage returns and quotes are rejected.
inline CsvTable parse_csv(const std::string& text, const std::string& what) {
    require(!text.empty(), ErrorCode::Truncated, what + " is empty (no header)");
    require(text.find('\r') == std::string::npos, ErrorCode::Malformed, what + ": CR line endings are not allowed");
    require(text.find('"') == std::string::npos, ErrorCode::Malformed, what + ": quoted fields are not allowed");
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        const auto nl = text.find('\n', start);
        lines.push_back(text.substr(start, nl == std::string::npos ? std::string::npos : nl - start));
        if (nl == std::string::npos) break;
        start = nl + 1;
    }
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::size_t s = 0;
        for (;;) {
            const auto c = line.find(',', s);
            out.push_back(line.substr(s, c == std::string::npos ? std::string::npos : c - s));
            if (c == std::string::npos) return out;
            s = c + 1;
        }
    };
    CsvTable t;
    t.header = split(lines[0]);
    std::set<std::string> seen;
    for (const auto& h : t.header) {
        require_identifier(h, what + " column name");
        require(seen.insert(h).second, ErrorCode::Malformed, what + ": duplicate column '" + h + "'");
    }
    for (std::size_t i = 1; i < lines.size(); ++i) {
        require(!lines[i].empty(), ErrorCode::Malformed, what + ": blank line " + std::to_string(i + 1));
        auto fields = split(lines[i]);
        require(fields.size() == t.header.size(), ErrorCode::Malformed,
                what + " line " + std::to_string(i + 1) + ": expected " + std::to_string(t.header.size()) +
                    " fields, got " + std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
        t.line.push_back(i + 1);
    }
    return t;
}

/// Requires every column in `required`, allows `optional`, and rejects the rest
/// unless `allow_extra`.
inline void check_columns(const CsvTable& t, std::initializer_list<std::string> required,
                          std::initializer_list<std::string> optional, const std::string& what,
                          bool allow_extra = false) {
    for (const auto& r : required)
        require(t.has(r), ErrorCode::Schema, what + " is missing required column '" + r + "'");
    if (allow_extra) return;
    for (const auto& h : t.header)
        require(std::find(required.begin(), required.end(), h) != required.end() ||
                    std::find(optional.begin(), optional.end(), h) != optional.end(),
                ErrorCode::Schema, what + " has unknown column '" + h + "'");
}

inline std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string where(const std::string& what, std::size_t line) { return what + " line " + std::to_string(line); }

inline double parse_double(const std::string& s, const std::string& what) {
    require(!s.empty(), ErrorCode::Malformed, what + ": empty number");
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    require(end == s.c_str() + s.size() && errno == 0 && std::isfinite(v), ErrorCode::Malformed,
            what + ": '" + s + "' is not a finite number");
    return v;
}

inline float parse_float(const std::string& s, const std::string& what) {
    require(!s.empty(), ErrorCode::Malformed, what + ": empty number");
    char* end = nullptr;
    errno = 0;
    const float v = std::strtof(s.c_str(), &end);
    require(end == s.c_str() + s.size() && errno == 0 && std::isfinite(v), ErrorCode::Malformed,
            what + ": '" + s + "' is not a finite number");
    return v;
}

inline std::size_t parse_index(const std::string& s, const std::string& what) {
    require(!s.empty() && s.size() < 10 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }),
            ErrorCode::Malformed, what + ": '" + s + "' is not a non-negative integer");
    return static_cast<std::size_t>(std::stoul(s));
}

// ---- score tables ------------------------------------------------------------

inline const char* kRawScoreHeader = "study_id,laterality,view,model_id,orientation,raw_score";
inline const char* kDerivedScoreHeader = "study_id,laterality,breast_score,breast_uncertainty,study_score";

inline synth::Laterality parse_laterality(const std::string& s, const std::string& what) {
    auto l = synth::laterality_from_string(s);
    require(l.has_value(), ErrorCode::Malformed, what + ": laterality '" + s + "' (allowed: L, R)");
    return *l;
}

/// One line per (image, model, orientation), in table order.
inline std::string raw_scores_to_csv(const scoring::ScoreTable& table) {
    std::string out = std::string(kRawScoreHeader) + "\n";
    for (const auto& r : table.images)
        for (std::size_t m = 0; m < r.raw.models(); ++m)
            for (auto o : {scoring::Orientation::Original, scoring::Orientation::VFlip})
                out += r.study_id + "," + synth::to_string(r.laterality) + "," + synth::to_string(r.view) + "," +
                       std::to_string(m) + "," + scoring::to_string(o) + "," + format_score(r.raw.at(o, m)) + "\n";
    return out;
}

inline std::string derived_scores_to_csv(std::span<const scoring::BreastRow> breasts) {
    std::string out = std::string(kDerivedScoreHeader) + "\n";
    for (const auto& b : breasts)
        out += b.study_id + "," + synth::to_string(b.laterality) + "," + format_score(b.breast_score) + "," +
               format_score(b.breast_uncertainty) + "," + format_score(b.study_score) + "\n";
    return out;
}

/// Image rows from a raw-score CSV; every image must carry all 2M raw scores
/// exactly once. Image-level fields are left for build_score_table().
inline std::vector<scoring::ImageRow> raw_scores_from_csv(const std::string& text, const std::string& what) {
    const auto t = parse_csv(text, what);
    check_columns(t, {"study_id", "laterality", "view", "model_id", "orientation", "raw_score"}, {}, what);
    const auto c_id = t.column("study_id"), c_lat = t.column("laterality"), c_view = t.column("view"),
               c_model = t.column("model_id"), c_or = t.column("orientation"), c_score = t.column("raw_score");
    struct Entry {
        std::map<std::pair<std::size_t, int>, float> scores;
    };
    std::map<std::tuple<std::string, synth::Laterality, synth::View>, Entry> images;
    std::size_t models = 0;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        const auto w = where(what, t.line[i]);
        require_identifier(row[c_id], w + " study_id");
        const auto lat = parse_laterality(row[c_lat], w);
        const auto view = synth::view_from_string(row[c_view]);
        require(view.has_value(), ErrorCode::Malformed, w + ": view '" + row[c_view] + "' (allowed: CC, MLO)");
        const auto model = parse_index(row[c_model], w + " model_id");
        const auto orient = scoring::orientation_from_string(row[c_or]);
        require(orient.has_value(), ErrorCode::Malformed,
                w + ": orientation '" + row[c_or] + "' (allowed: original, vflip)");
        const float score = parse_float(row[c_score], w + " raw_score");
        require(score >= 0.0f && score <= 1.0f, ErrorCode::Malformed, w + ": raw_score outside [0, 1]");
        auto& e = images[{row[c_id], lat, *view}];
        require(e.scores.emplace(std::pair(model, static_cast<int>(*orient)), score).second, ErrorCode::Malformed,
                w + ": duplicate (image, model_id, orientation)");
        models = std::max(models, model + 1);
    }
    std::vector<scoring::ImageRow> rows;
    for (auto& [key, e] : images) {
        require(e.scores.size() == 2 * models, ErrorCode::Malformed,
                what + ": image " + std::get<0>(key) + " " + synth::to_string(std::get<1>(key)) + "-" +
                    synth::to_string(std::get<2>(key)) + " has " + std::to_string(e.scores.size()) +
                    " raw scores, expected " + std::to_string(2 * models));
        scoring::ImageRow r{std::get<0>(key), std::get<1>(key), std::get<2>(key), scoring::RawScoreSet(models), 0, 0};
        for (const auto& [mo, s] : e.scores) r.raw.at(static_cast<scoring::Orientation>(mo.second), mo.first) = s;
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::vector<scoring::BreastRow> derived_scores_from_csv(const std::string& text, const std::string& what) {
    const auto t = parse_csv(text, what);
    check_columns(t, {"study_id", "laterality", "breast_score", "breast_uncertainty", "study_score"}, {}, what);
    const auto c_id = t.column("study_id"), c_lat = t.column("laterality"), c_s = t.column("breast_score"),
               c_u = t.column("breast_uncertainty"), c_st = t.column("study_score");
    std::vector<scoring::BreastRow> rows;
    std::set<std::pair<std::string, synth::Laterality>> seen;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        const auto w = where(what, t.line[i]);
        require_identifier(row[c_id], w + " study_id");
        scoring::BreastRow b{row[c_id], parse_laterality(row[c_lat], w), parse_double(row[c_s], w + " breast_score"),
                             parse_double(row[c_u], w + " breast_uncertainty"),
                             parse_double(row[c_st], w + " study_score")};
        require(b.breast_score >= 0 && b.breast_score <= 1 && b.study_score >= 0 && b.study_score <= 1,
                ErrorCode::Malformed, w + ": scores must lie in [0, 1]");
        require(b.breast_uncertainty >= 0, ErrorCode::Malformed, w + ": breast_uncertainty must be >= 0");
        require(seen.insert({b.study_id, b.laterality}).second, ErrorCode::Malformed,
                w + ": duplicate (study_id, laterality)");
        rows.push_back(std::move(b));
    }
    return rows;
}

inline void write_score_table(const scoring::ScoreTable& table, const fs::path& raw_path, const fs::path& derived_path) {
    write_file(raw_path, raw_scores_to_csv(table));
    write_file(derived_path, derived_scores_to_csv(table.breasts));
}

inline scoring::ScoreTable read_score_table(const fs::path& raw_path, const scoring::EnsembleWeights& weights) {
    return scoring::build_score_table(raw_scores_from_csv(read_file(raw_path), raw_path.string()), weights);
}

inline std::vector<scoring::BreastRow> read_derived_scores(const fs::path& path) {
    return derived_scores_from_csv(read_file(path), path.string());
}

// ---- metadata ----------------------------------------------------------------

/// study_id,label,cancer_laterality,tumor_size_mm followed by one column per tag key (sorted).
inline std::string metadata_to_csv(std::span<const StudyMeta> rows) {
    std::set<std::string> tag_keys;
    for (const auto& r : rows)
        for (const auto& [k, v] : r.tags) tag_keys.insert(k);
    std::string out = "study_id,label,cancer_laterality,tumor_size_mm";
    for (const auto& k : tag_keys) out += "," + k;
    out += "\n";
    for (const auto& r : rows) {
        out += r.study_id + "," + synth::to_string(r.label) + "," +
               (r.cancer_laterality ? synth::to_string(*r.cancer_laterality) : "") + "," +
               (r.tumor_size_mm ? format_score(*r.tumor_size_mm) : "");
        for (const auto& k : tag_keys) {
            auto it = r.tags.find(k);
            out += "," + (it == r.tags.end() ? std::string() : it->second);
        }
        out += "\n";
    }
    return out;
}

/// Required columns study_id and label; optional cancer_laterality and
/// tumor_size_mm; any other column is a tag (empty cell = tag absent).
inline std::vector<StudyMeta> metadata_from_csv(const std::string& text, const std::string& what,
                                                bool require_tumor_size = false) {
    const auto t = parse_csv(text, what);
    check_columns(t, {"study_id", "label"}, {}, what, /*allow_extra=*/true);
    const auto c_id = t.column("study_id"), c_label = t.column("label");
    const auto c_lat = t.column("cancer_laterality"), c_size = t.column("tumor_size_mm");
    std::vector<StudyMeta> out;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        const auto w = where(what, t.line[i]);
        StudyMeta m;
        m.study_id = row[c_id];
        require_identifier(m.study_id, w + " study_id");
        require(ids.insert(m.study_id).second, ErrorCode::Malformed, w + ": duplicate study_id " + m.study_id);
        const auto label = synth::label_from_string(row[c_label]);
        require(label.has_value(), ErrorCode::Malformed,
                w + ": label '" + row[c_label] + "' is not one of normal, benign, cancer");
        m.label = *label;
        const bool cancer = m.label == synth::Label::Cancer;
        if (c_lat < t.header.size() && !row[c_lat].empty()) {
            require(cancer, ErrorCode::Malformed, w + ": cancer_laterality given for a non-cancer study");
            m.cancer_laterality = parse_laterality(row[c_lat], w);
        }
        if (c_size < t.header.size() && !row[c_size].empty()) {
            require(cancer, ErrorCode::Malformed, w + ": tumor_size_mm given for a non-cancer study");
            m.tumor_size_mm = parse_double(row[c_size], w + " tumor_size_mm");
            require(*m.tumor_size_mm > 0, ErrorCode::Malformed, w + ": tumor_size_mm must be > 0");
        }
        if (cancer && require_tumor_size)
            require(m.tumor_size_mm.has_value(), ErrorCode::Malformed,
                    w + ": cancer study " + m.study_id + " has no tumor_size_mm (required for size normalisation)");
        for (std::size_t c = 0; c < t.header.size(); ++c) {
            if (c == c_id || c == c_label || c == c_lat || c == c_size || row[c].empty()) continue;
            require_identifier(row[c], w + " tag " + t.header[c]);
            m.tags[t.header[c]] = row[c];
        }
        out.push_back(std::move(m));
    }
    return out;
}

inline std::vector<StudyMeta> read_metadata(const fs::path& path, bool require_tumor_size = false) {
    return metadata_from_csv(read_file(path), path.string(), require_tumor_size);
}

inline void write_metadata(std::span<const StudyMeta> rows, const fs::path& path) {
    write_file(path, metadata_to_csv(rows));
}

// ---- loss traces -------------------------------------------------------------

inline std::string loss_trace_to_csv(std::span<const double> trace) {
    std::string out = "epoch,mean_loss\n";
    for (std::size_t e = 0; e < trace.size(); ++e) out += std::to_string(e) + "," + format_score(trace[e]) + "\n";
    return out;
}

}  // namespace triage::io
