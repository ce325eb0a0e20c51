#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "attnmerge/tensor_store.hpp"
#include "attnmerge/util.hpp"

namespace testutil {

/// Scratch directory removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& stem) {
        path_ = attnmerge::temp_path(stem, "");
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

  private:
    std::filesystem::path path_;
};

inline std::string env_or_fail(const char* name) {
    const char* v = std::getenv(name);
    return v ? v : "";
}

/// Random checkpoint with mixed dtypes; the driver for the round-trip oracle.
inline attnmerge::Checkpoint random_checkpoint(std::mt19937_64& rng) {
    using attnmerge::uniform_below;
    attnmerge::CheckpointBuilder b;
    const int tensors = 1 + static_cast<int>(uniform_below(rng, 6));
    for (int t = 0; t < tensors; ++t) {
        std::string name = "t" + std::to_string(t);
        const int depth = static_cast<int>(uniform_below(rng, 3));
        for (int d = 0; d < depth; ++d)
            name += "." + std::string(1, static_cast<char>('a' + uniform_below(rng, 4)));
        const int rank = static_cast<int>(uniform_below(rng, 3));
        std::vector<std::int64_t> shape;
        std::int64_t numel = 1;
        for (int r = 0; r < rank; ++r) {
            shape.push_back(1 + static_cast<std::int64_t>(uniform_below(rng, 5)));
            numel *= shape.back();
        }
        const int dtype_pick = static_cast<int>(uniform_below(rng, 3));
        if (dtype_pick == 0) {
            std::vector<float> values(static_cast<std::size_t>(numel));
            for (auto& v : values)
                v = static_cast<float>(attnmerge::uniform_unit(rng) * 4.0 - 2.0);
            b.add_f32(name, shape, values);
        } else {
            std::vector<std::uint8_t> bytes(static_cast<std::size_t>(numel) * 2);
            for (auto& v : bytes) v = static_cast<std::uint8_t>(uniform_below(rng, 256));
            // Avoid NaN payload games: mask exponent bits down for F16.
            b.add_raw(name, dtype_pick == 1 ? "F16" : "BF16", shape, bytes);
        }
    }
    return b.build();
}

}  // namespace testutil
