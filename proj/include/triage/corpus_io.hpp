#pragma once

// On-disk synthetic corpus:
//
//   manifest.json                      version, generator echo, dimensions, sha256 per file
//   patches/labels.csv                 patch_id,label
//   patches/patches.bin                all patches, float32 little-endian, row-major
//   <split>/metadata.csv               one row per study
//   <split>/images/<id>_<L|R>_<CC|MLO>.bin
//
// Every read checks the file against the manifest digest.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "triage/error.hpp"
#include "triage/io.hpp"
#include "triage/metadata.hpp"
#include "triage/synthcorpus.hpp"
#include "triage/twostage.hpp"

namespace triage::io {

inline std::string image_file_name(const std::string& study_id, synth::Laterality l, synth::View v) {
    return study_id + "_" + synth::to_string(l) + "_" + synth::to_string(v) + ".bin";
}

/// Collects files and their digests while a corpus is written.
class CorpusWriter {
public:
    CorpusWriter(fs::path dir, json generator) : dir_(std::move(dir)), generator_(std::move(generator)) {}

    void write_patches(const std::vector<synth::LabeledPatch>& patches) {
        require(!patches.empty(), ErrorCode::InvalidArgument, "no patches to write");
        const auto& shape = patches.front().image.shape();
        std::string labels = "patch_id,label\n", data;
        for (std::size_t i = 0; i < patches.size(); ++i) {
            require(patches[i].image.shape() == shape, ErrorCode::ShapeMismatch, "patches differ in shape");
            labels += std::to_string(i) + "," + std::to_string(patches[i].label) + "\n";
            data += encode_floats(patches[i].image.data());
        }
        put("patches/labels.csv", labels);
        put("patches/patches.bin", data);
        patches_ = {{"count", patches.size()}, {"channels", shape[0]}, {"height", shape[1]}, {"width", shape[2]}};
    }

    void write_split(const std::string& name, const std::vector<synth::StudyRecord>& studies) {
        require_identifier(name, "split name");
        require(!studies.empty(), ErrorCode::InvalidArgument, "split " + name + " has no studies");
        std::vector<StudyMeta> meta;
        const auto& shape = studies.front().images[0].shape();
        for (const auto& s : studies) {
            meta.push_back(metadata_of(s));
            for (auto lat : synth::kLateralities)
                for (auto view : synth::kViews) {
                    const auto& img = s.image(lat, view);
                    require(img.shape() == shape, ErrorCode::ShapeMismatch, "study images differ in shape");
                    put(name + "/images/" + image_file_name(s.study_id, lat, view), encode_floats(img.data()));
                }
        }
        put(name + "/metadata.csv", metadata_to_csv(meta));
        splits_[name] = {{"studies", studies.size()}, {"channels", shape[0]}, {"height", shape[1]}, {"width", shape[2]}};
    }

    void finish() {
        json j{{"format_version", kFormatVersion},
               {"dtype", "float32-le"},
               {"generator", generator_},
               {"files", files_},
               {"splits", splits_}};
        if (!patches_.is_null()) j["patches"] = patches_;
        write_file(dir_ / "manifest.json", j.dump(2) + "\n");
    }

private:
    void put(const std::string& rel, const std::string& bytes) {
        write_file(dir_ / rel, bytes);
        files_[rel] = sha256_hex(bytes);
    }

    fs::path dir_;
    json generator_;
    json files_ = json::object();
    json splits_ = json::object();
    json patches_;
};

class CorpusReader {
public:
    explicit CorpusReader(fs::path dir) : dir_(std::move(dir)) {
        const auto path = dir_ / "manifest.json";
        manifest_ = parse_json(read_file(path), path.string());
        check_format_version(manifest_, path.string());
        reject_unknown_keys(manifest_, {"format_version", "dtype", "generator", "files", "splits", "patches"},
                            path.string());
        require(get_field<std::string>(manifest_, "dtype", path.string()) == "float32-le", ErrorCode::Schema,
                path.string() + ": unsupported dtype");
        require(manifest_.contains("files") && manifest_["files"].is_object(), ErrorCode::Schema,
                path.string() + " has no file listing");
    }

    const json& manifest() const { return manifest_; }

    /// File contents after checking the manifest digest.
    std::string read_verified(const std::string& rel) const {
        const auto& files = manifest_["files"];
        require(files.contains(rel), ErrorCode::Schema, "file " + rel + " is not listed in the corpus manifest");
        const auto bytes = read_file(dir_ / rel);
        require(sha256_hex(bytes) == files[rel].get<std::string>(), ErrorCode::DigestMismatch,
                (dir_ / rel).string() + " does not match its manifest digest");
        return bytes;
    }

    std::vector<std::string> split_names() const {
        std::vector<std::string> out;
        if (manifest_.contains("splits"))
            for (const auto& [k, v] : manifest_["splits"].items()) out.push_back(k);
        return out;
    }

    twostage::Dataset read_patches() const {
        require(manifest_.contains("patches"), ErrorCode::Schema, "corpus has no patch set");
        const auto& p = manifest_["patches"];
        const Shape shape{get_field<std::size_t>(p, "channels", "patches"), get_field<std::size_t>(p, "height", "patches"),
                          get_field<std::size_t>(p, "width", "patches")};
        const auto count = get_field<std::size_t>(p, "count", "patches");
        const auto labels = parse_csv(read_verified("patches/labels.csv"), "patches/labels.csv");
        check_columns(labels, {"patch_id", "label"}, {}, "patches/labels.csv");
        require(labels.rows.size() == count, ErrorCode::Malformed, "patch label count disagrees with manifest");
        const auto values = decode_floats(read_verified("patches/patches.bin"), count * shape_size(shape),
                                          "patches/patches.bin");
        twostage::Dataset out;
        const auto per = shape_size(shape);
        for (std::size_t i = 0; i < count; ++i) {
            const auto& row = labels.rows[i];
            require(parse_index(row[labels.column("patch_id")], "patch_id") == i, ErrorCode::Malformed,
                    "patch ids must be 0..n-1 in order");
            const auto label = parse_index(row[labels.column("label")], "patch label");
            require(label <= 1, ErrorCode::Malformed, "patch labels must be 0 or 1");
            std::vector<float> v(values.begin() + static_cast<long>(i * per), values.begin() + static_cast<long>((i + 1) * per));
            out.push_back({Tensor(shape, std::move(v)), static_cast<int>(label)});
        }
        return out;
    }

    std::vector<StudyMeta> read_split_metadata(const std::string& split) const {
        return metadata_from_csv(read_verified(split + "/metadata.csv"), split + "/metadata.csv");
    }

    /// Studies of one split with images and labels; lesion geometry is not persisted.
    std::vector<synth::StudyRecord> read_split(const std::string& split) const {
        require(manifest_.contains("splits") && manifest_["splits"].contains(split), ErrorCode::NotFound,
                "corpus has no split named '" + split + "'");
        const auto& sj = manifest_["splits"][split];
        const Shape shape{get_field<std::size_t>(sj, "channels", split), get_field<std::size_t>(sj, "height", split),
                          get_field<std::size_t>(sj, "width", split)};
        std::vector<synth::StudyRecord> out;
        for (auto& m : read_split_metadata(split)) {
            synth::StudyRecord r;
            r.study_id = m.study_id;
            r.label = m.label;
            r.tumor_size_mm = m.tumor_size_mm;
            r.tags = m.tags;
            if (m.cancer_laterality) {
                r.lesion_laterality = m.cancer_laterality;
            } else if (auto it = m.tags.find("lesion_laterality"); it != m.tags.end()) {
                r.lesion_laterality = synth::laterality_from_string(it->second);
            }
            for (auto lat : synth::kLateralities)
                for (auto view : synth::kViews) {
                    const auto rel = split + "/images/" + image_file_name(m.study_id, lat, view);
                    r.images[synth::image_index(lat, view)] =
                        Tensor(shape, decode_floats(read_verified(rel), shape_size(shape), rel));
                }
            out.push_back(std::move(r));
        }
        return out;
    }

private:
    fs::path dir_;
    json manifest_;
};

}  // namespace triage::io
