#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace attnmerge {

// Checkpoint file layout:
//   bytes 0..7   little-endian u64 = byte length H of the metadata block
//   bytes 8..8+H UTF-8 JSON mapping tensor name -> {dtype, shape, data_offsets},
//                keys sorted lexicographically, no insignificant whitespace
//   rest         raw data buffer; offsets are relative to the buffer start,
//                elements little-endian
// An optional "__metadata__" object of string pairs carries the layer count
// and the layer name template so a written checkpoint reloads self-described.

std::size_t dtype_size(const std::string& dtype);  // 0 when unknown
bool dtype_is_float(const std::string& dtype);     // F32/F16/BF16

struct TensorMeta {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::int64_t numel() const;
    std::uint64_t byte_size() const { return end - begin; }
};

class Checkpoint {
  public:
    std::map<std::string, TensorMeta> metas;      // lexicographic by construction
    std::vector<std::uint8_t> data;
    std::map<std::string, std::string> extra;     // "__metadata__" string pairs

    int layer_count = 0;
    std::string name_template;  // e.g. "blk.{i}.attn.{p}"; "{i}" is the layer index
    // Derived by set_layer_template: tensor names per layer, lexicographic.
    std::vector<std::vector<std::string>> layer_names;

    bool has(const std::string& name) const { return metas.count(name) != 0; }
    const TensorMeta& meta(const std::string& name) const;
    std::span<const std::uint8_t> raw(const std::string& name) const;
    std::span<std::uint8_t> raw_mut(const std::string& name);

    /// Values as F32; F16/BF16 are widened on read. Always a copy.
    Eigen::VectorXf tensor_f32(const std::string& name) const;

    /// Overwrites an F32 tensor's bytes in place. Sizes must match.
    void set_f32(const std::string& name, std::span<const float> values);

    bool is_layer_tensor(const std::string& name) const;  // matches template at any index
};

struct LayerTensor {
    std::string name;
    Eigen::VectorXf values;  // flat F32
};

struct LayerParamGroup {
    int layer_index = 0;
    std::vector<LayerTensor> tensors;  // lexicographic by name
};

struct ReadOptions {
    bool strict = true;            // reject unknown dtype tags
    std::string name_template;     // fallback when the file carries none
};

Checkpoint read_checkpoint(const std::string& path, const ReadOptions& opts = {});
void write_checkpoint(const Checkpoint& ck, const std::string& path);

/// Serialize to the exact on-disk byte stream (used by write_checkpoint and
/// by tests asserting byte identity).
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const ReadOptions& opts = {});

/// Sets the template, re-derives layer_count from matching tensor names and
/// validates that every index 0..L-1 resolves to at least one tensor.
void set_layer_template(Checkpoint& ck, const std::string& name_template);

/// All tensors addressed by the template at layer `index`, lexicographic.
LayerParamGroup layer_params(const Checkpoint& ck, int index);

/// Throws unless M and N have equal layer counts and identical name lists and
/// shapes inside every layer group. Run before any merge.
void check_merge_compatible(const Checkpoint& m, const Checkpoint& n);

/// Incremental construction with canonical packing: offsets are assigned in
/// lexicographic name order when build() runs.
class CheckpointBuilder {
  public:
    CheckpointBuilder& add_f32(const std::string& name, std::vector<std::int64_t> shape,
                               std::span<const float> values);
    CheckpointBuilder& add_raw(const std::string& name, const std::string& dtype,
                               std::vector<std::int64_t> shape, std::span<const std::uint8_t> bytes);
    CheckpointBuilder& layer_template(const std::string& tmpl);
    CheckpointBuilder& metadata(const std::string& key, const std::string& value);
    Checkpoint build() const;

  private:
    struct Pending {
        std::string dtype;
        std::vector<std::int64_t> shape;
        std::vector<std::uint8_t> bytes;
    };
    std::map<std::string, Pending> pending_;
    std::string template_;
    std::map<std::string, std::string> extra_;
};

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b);

}  // namespace attnmerge
