#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfr/common.hpp"
#include "pfr/face_synth.hpp"
#include "pfr/image.hpp"
#include "pfr/image_io.hpp"
#include "pfr/rng.hpp"

namespace pfr {

struct Identity {
    std::string id;
    std::vector<ImageBuffer> images;
    std::vector<std::string> filenames;
    std::optional<FaceParams> params;          // synthetic data only
    std::vector<uint64_t> jitter_seeds;        // synthetic data only
};

struct IdentityDataset {
    std::vector<Identity> identities;

    bool empty() const { return identities.empty(); }

    size_t total_images() const {
        size_t n = 0;
        for (const auto& id : identities) n += id.images.size();
        return n;
    }

    const Identity* find(const std::string& id) const {
        for (const auto& ident : identities) {
            if (ident.id == id) return &ident;
        }
        return nullptr;
    }
};

struct ReferenceSet {
    std::string identity_id;
    std::vector<ImageBuffer> images;  // exactly n_ref, default 5
};

// Random crop (probability crop_prob) or full-image resize, both to
// crop_size x crop_size. Stream consumption order is pinned: identity,
// image, branch, crop offsets.
inline ImageBuffer sample_training_example(const IdentityDataset& dataset, int crop_size,
                                           double crop_prob, RandomStream& rng) {
    if (dataset.empty()) {
        throw EmptyDataset("sample_training_example: dataset is empty");
    }
    const auto& ident =
        dataset.identities[rng.uniform_int(dataset.identities.size())];
    const auto& img = ident.images[rng.uniform_int(ident.images.size())];
    const bool take_crop = rng.bernoulli(crop_prob);
    if (take_crop) {
        check(img.height() >= crop_size && img.width() >= crop_size,
              "sample_training_example: image smaller than crop size");
        const int y0 = static_cast<int>(rng.uniform_int(img.height() - crop_size + 1));
        const int x0 = static_cast<int>(rng.uniform_int(img.width() - crop_size + 1));
        return crop(img, y0, x0, crop_size, crop_size);
    }
    return resize_bilinear(img, crop_size, crop_size);
}

inline const ImageBuffer& sample_reference(const ReferenceSet& refs, RandomStream& rng) {
    check(!refs.images.empty(), "sample_reference: empty reference set");
    return refs.images[rng.uniform_int(refs.images.size())];
}

inline ReferenceSet make_reference_set(const Identity& ident, int n_ref) {
    check(n_ref >= 1, "n_ref must be >= 1");
    check(static_cast<size_t>(n_ref) <= ident.images.size(),
          "identity has fewer images than n_ref");
    ReferenceSet refs;
    refs.identity_id = ident.id;
    refs.images.assign(ident.images.begin(), ident.images.begin() + n_ref);
    return refs;
}

// ---------------------------------------------------------------------------
// Synthetic toy datasets
// ---------------------------------------------------------------------------

inline IdentityDataset make_synthetic_dataset(int n_identities, int images_per_identity,
                                              int size, uint64_t seed) {
    check(n_identities >= 1 && images_per_identity >= 1, "dataset counts must be >= 1");
    IdentityDataset ds;
    RandomStream param_rng(seed, 0x1d);
    for (int i = 0; i < n_identities; ++i) {
        Identity ident;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "id_%04d", i);
        ident.id = buf;
        ident.params = sample_face_params(param_rng);
        for (int k = 0; k < images_per_identity; ++k) {
            const uint64_t jseed =
                RandomStream(seed, 0x2e).child(static_cast<uint64_t>(i) * 100000 + k).seed();
            ident.jitter_seeds.push_back(jseed);
            ident.images.push_back(generate_face(*ident.params, size, jseed));
            std::snprintf(buf, sizeof(buf), "img_%03d.png", k);
            ident.filenames.push_back(buf);
        }
        ds.identities.push_back(std::move(ident));
    }
    return ds;
}

// Layout: <root>/<identity_id>/*.png plus a params.json sidecar carrying the
// per-identity parameter vectors (and, for replayability, per-image jitter
// seeds).
inline void write_dataset(const IdentityDataset& ds, const std::string& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    nlohmann::json sidecar;
    for (const auto& ident : ds.identities) {
        const fs::path dir = fs::path(root) / ident.id;
        fs::create_directories(dir);
        nlohmann::json entry;
        if (ident.params) {
            entry["params"] = ident.params->to_vector();
        }
        for (size_t k = 0; k < ident.images.size(); ++k) {
            const std::string name =
                k < ident.filenames.size() ? ident.filenames[k]
                                           : ("img_" + std::to_string(k) + ".png");
            write_png((dir / name).string(), ident.images[k]);
            if (k < ident.jitter_seeds.size()) {
                entry["images"][name] = ident.jitter_seeds[k];
            }
        }
        sidecar[ident.id] = entry;
    }
    std::ofstream out(fs::path(root) / "params.json");
    out << sidecar.dump(2) << "\n";
}

inline IdentityDataset load_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) {
        throw IoError("dataset root not found: " + root);
    }
    nlohmann::json sidecar;
    const fs::path params_path = fs::path(root) / "params.json";
    if (fs::exists(params_path)) {
        std::ifstream in(params_path);
        in >> sidecar;
    }

    IdentityDataset ds;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
        Identity ident;
        ident.id = dir.filename().string();
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir)) {
            const auto ext = e.path().extension().string();
            if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            ident.images.push_back(read_image(f.string()));
            ident.filenames.push_back(f.filename().string());
        }
        if (ident.images.empty()) continue;
        if (sidecar.contains(ident.id)) {
            const auto& entry = sidecar[ident.id];
            if (entry.contains("params")) {
                ident.params =
                    FaceParams::from_vector(entry["params"].get<std::vector<double>>());
            }
            if (entry.contains("images")) {
                for (const auto& name : ident.filenames) {
                    ident.jitter_seeds.push_back(
                        entry["images"].value(name, uint64_t(0)));
                }
            }
        }
        ds.identities.push_back(std::move(ident));
    }
    if (ds.empty()) {
        throw EmptyDataset("no identities found under " + root);
    }
    return ds;
}

}  // namespace pfr
