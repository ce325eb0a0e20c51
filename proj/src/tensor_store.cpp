#include "attnmerge/tensor_store.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <regex>

#include "attnmerge/errors.hpp"
#include "attnmerge/util.hpp"
#include "json.hpp"

namespace attnmerge {

namespace {

using json = nlohmann::json;

constexpr const char* kMetaLayerCount = "layer_count";
constexpr const char* kMetaTemplate = "name_template";

// Escapes regex specials in the literal parts of a name template, turns the
// "{i}" placeholder into a capture of the layer index and any other "{...}"
// placeholder into a wildcard.
std::string template_to_pattern(const std::string& tmpl, const std::string& index_pattern) {
    std::string out;
    bool saw_index = false;
    for (std::size_t i = 0; i < tmpl.size();) {
        if (tmpl[i] == '{') {
            const auto close = tmpl.find('}', i);
            if (close == std::string::npos) throw data_error("unbalanced '{' in name template: " + tmpl);
            const std::string key = tmpl.substr(i + 1, close - i - 1);
            if (key == "i") {
                out += index_pattern;
                saw_index = true;
            } else {
                out += ".+";
            }
            i = close + 1;
        } else {
            if (std::strchr("\\^$.|?*+()[]{}", tmpl[i])) out += '\\';
            out += tmpl[i];
            ++i;
        }
    }
    if (!saw_index) throw data_error("name template is missing the {i} layer placeholder: " + tmpl);
    return out;
}

std::regex template_regex_any(const std::string& tmpl) {
    return std::regex(template_to_pattern(tmpl, "([0-9]+)"));
}

void validate_metas(const std::map<std::string, TensorMeta>& metas, std::uint64_t data_size) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (const auto& [name, m] : metas) {
        if (m.end < m.begin) throw data_error("tensor '" + name + "': end offset before begin");
        if (m.end > data_size)
            throw data_error("tensor '" + name + "': data range exceeds buffer (" +
                             std::to_string(m.end) + " > " + std::to_string(data_size) + ")");
        const std::size_t esize = dtype_size(m.dtype);
        if (esize != 0) {
            const std::uint64_t expected = esize * static_cast<std::uint64_t>(m.numel());
            if (m.byte_size() != expected)
                throw data_error("tensor '" + name + "': size mismatch, offsets span " +
                                 std::to_string(m.byte_size()) + " bytes but dtype x shape needs " +
                                 std::to_string(expected));
        }
        if (m.byte_size() > 0) ranges.emplace_back(m.begin, m.end);
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].first < ranges[i - 1].second)
            throw data_error("overlapping tensor data ranges in checkpoint");
    }
}

}  // namespace

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32" || dtype == "I32" || dtype == "U32") return 4;
    if (dtype == "F16" || dtype == "BF16" || dtype == "I16" || dtype == "U16") return 2;
    if (dtype == "F64" || dtype == "I64" || dtype == "U64") return 8;
    if (dtype == "I8" || dtype == "U8" || dtype == "BOOL") return 1;
    return 0;
}

bool dtype_is_float(const std::string& dtype) {
    return dtype == "F32" || dtype == "F16" || dtype == "BF16";
}

std::int64_t TensorMeta::numel() const {
    std::int64_t n = 1;
    for (const auto d : shape) {
        if (d < 0) throw data_error("negative extent in tensor shape");
        n *= d;
    }
    return n;
}

const TensorMeta& Checkpoint::meta(const std::string& name) const {
    const auto it = metas.find(name);
    if (it == metas.end()) throw data_error("no tensor named '" + name + "' in checkpoint");
    return it->second;
}

std::span<const std::uint8_t> Checkpoint::raw(const std::string& name) const {
    const auto& m = meta(name);
    return {data.data() + m.begin, static_cast<std::size_t>(m.byte_size())};
}

std::span<std::uint8_t> Checkpoint::raw_mut(const std::string& name) {
    const auto& m = meta(name);
    return {data.data() + m.begin, static_cast<std::size_t>(m.byte_size())};
}

Eigen::VectorXf Checkpoint::tensor_f32(const std::string& name) const {
    const auto& m = meta(name);
    const auto bytes = raw(name);
    const std::int64_t n = m.numel();
    Eigen::VectorXf out(n);
    if (m.dtype == "F32") {
        std::memcpy(out.data(), bytes.data(), bytes.size());
    } else if (m.dtype == "F16" || m.dtype == "BF16") {
        const bool is_f16 = m.dtype == "F16";
        for (std::int64_t i = 0; i < n; ++i) {
            std::uint16_t h;
            std::memcpy(&h, bytes.data() + 2 * i, 2);
            out[i] = is_f16 ? f16_to_f32(h) : bf16_to_f32(h);
        }
    } else {
        throw data_error("tensor '" + name + "' has dtype " + m.dtype + ", not convertible to F32");
    }
    return out;
}

void Checkpoint::set_f32(const std::string& name, std::span<const float> values) {
    const auto& m = meta(name);
    if (m.dtype != "F32") throw data_error("set_f32 on non-F32 tensor '" + name + "'");
    if (static_cast<std::int64_t>(values.size()) != m.numel())
        throw data_error("set_f32 size mismatch for tensor '" + name + "'");
    std::memcpy(data.data() + m.begin, values.data(), values.size() * sizeof(float));
}

bool Checkpoint::is_layer_tensor(const std::string& name) const {
    if (name_template.empty()) return false;
    return std::regex_match(name, template_regex_any(name_template));
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const ReadOptions& opts) {
    if (bytes.size() < 8) throw data_error("malformed header: file shorter than 8 bytes");
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | bytes[static_cast<std::size_t>(i)];
    if (8 + header_len > bytes.size())
        throw data_error("malformed header: metadata length exceeds file size");

    json meta_json;
    try {
        meta_json = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const json::exception& e) {
        throw data_error(std::string("malformed header: ") + e.what());
    }
    if (!meta_json.is_object()) throw data_error("malformed header: metadata is not an object");

    Checkpoint ck;
    ck.data.assign(bytes.begin() + 8 + header_len, bytes.end());

    for (const auto& [name, value] : meta_json.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : value.items()) ck.extra[k] = v.get<std::string>();
            continue;
        }
        TensorMeta m;
        try {
            m.dtype = value.at("dtype").get<std::string>();
            m.shape = value.at("shape").get<std::vector<std::int64_t>>();
            const auto offs = value.at("data_offsets");
            m.begin = offs.at(0).get<std::uint64_t>();
            m.end = offs.at(1).get<std::uint64_t>();
        } catch (const json::exception& e) {
            throw data_error("malformed meta entry for tensor '" + name + "': " + e.what());
        }
        if (opts.strict && dtype_size(m.dtype) == 0)
            throw data_error("unsupported dtype '" + m.dtype + "' for tensor '" + name + "'");
        ck.metas.emplace(name, std::move(m));
    }

    validate_metas(ck.metas, ck.data.size());

    std::uint64_t max_end = 0;
    for (const auto& [_, m] : ck.metas) max_end = std::max(max_end, m.end);
    if (ck.data.size() != max_end)
        throw data_error("data buffer length " + std::to_string(ck.data.size()) +
                         " does not equal the maximum end offset " + std::to_string(max_end));

    // Layer addressing lives in typed fields; the extra map keeps only
    // user-supplied pairs so serialization does not duplicate them.
    std::string tmpl = opts.name_template;
    if (const auto it = ck.extra.find(kMetaTemplate); it != ck.extra.end()) {
        tmpl = it->second;
        ck.extra.erase(it);
    }
    int declared = -1;
    if (const auto it = ck.extra.find(kMetaLayerCount); it != ck.extra.end()) {
        declared = std::stoi(it->second);
        ck.extra.erase(it);
    }
    if (!tmpl.empty()) {
        set_layer_template(ck, tmpl);
        if (declared >= 0 && declared != ck.layer_count)
            throw data_error("declared layer_count " + std::to_string(declared) +
                             " does not match detected " + std::to_string(ck.layer_count));
    }
    return ck;
}

Checkpoint read_checkpoint(const std::string& path, const ReadOptions& opts) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open checkpoint file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (!in.good() && !in.eof()) throw data_error("I/O error reading " + path);
    return parse_checkpoint(bytes, opts);
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    validate_metas(ck.metas, ck.data.size());

    json meta_json = json::object();
    if (!ck.extra.empty() || !ck.name_template.empty() || ck.layer_count > 0) {
        json extra = json::object();
        for (const auto& [k, v] : ck.extra) extra[k] = v;
        if (!ck.name_template.empty()) extra[kMetaTemplate] = ck.name_template;
        if (ck.layer_count > 0) extra[kMetaLayerCount] = std::to_string(ck.layer_count);
        if (!extra.empty()) meta_json["__metadata__"] = extra;
    }
    for (const auto& [name, m] : ck.metas) {
        meta_json[name] = {{"dtype", m.dtype}, {"shape", m.shape}, {"data_offsets", {m.begin, m.end}}};
    }

    // nlohmann::json keeps object keys in std::map order, which is exactly the
    // lexicographic layout the format requires; dump() emits no whitespace.
    const std::string header = meta_json.dump();
    std::vector<std::uint8_t> out;
    out.reserve(8 + header.size() + ck.data.size());
    const std::uint64_t h = header.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((h >> (8 * i)) & 0xff));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), ck.data.begin(), ck.data.end());
    return out;
}

void write_checkpoint(const Checkpoint& ck, const std::string& path) {
    const auto bytes = serialize_checkpoint(ck);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open output file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw data_error("I/O error writing " + path);
}

void set_layer_template(Checkpoint& ck, const std::string& name_template) {
    const std::regex re = template_regex_any(name_template);
    int max_index = -1;
    std::smatch m;
    std::vector<std::pair<int, std::string>> matched;
    for (const auto& [name, _] : ck.metas) {
        if (std::regex_match(name, m, re)) {
            const int idx = std::stoi(m[1].str());
            max_index = std::max(max_index, idx);
            matched.emplace_back(idx, name);
        }
    }
    if (max_index < 0)
        throw data_error("name template '" + name_template + "' matches no tensor in checkpoint");
    const int count = max_index + 1;
    std::vector<std::vector<std::string>> names(static_cast<std::size_t>(count));
    for (auto& [idx, name] : matched) names[static_cast<std::size_t>(idx)].push_back(std::move(name));
    for (int i = 0; i < count; ++i) {
        if (names[static_cast<std::size_t>(i)].empty())
            throw data_error("layer " + std::to_string(i) + " resolves to no tensor under template '" +
                             name_template + "'");
    }
    // metas iterate lexicographically, so each per-layer list already is
    ck.name_template = name_template;
    ck.layer_count = count;
    ck.layer_names = std::move(names);
}

LayerParamGroup layer_params(const Checkpoint& ck, int index) {
    if (ck.name_template.empty()) throw data_error("checkpoint has no layer name template");
    if (index < 0 || index >= ck.layer_count)
        throw data_error("layer index out of range: " + std::to_string(index) + " with L=" +
                         std::to_string(ck.layer_count));
    LayerParamGroup group;
    group.layer_index = index;
    for (const auto& name : ck.layer_names[static_cast<std::size_t>(index)])
        group.tensors.push_back({name, ck.tensor_f32(name)});
    return group;
}

void check_merge_compatible(const Checkpoint& m, const Checkpoint& n) {
    if (m.layer_count <= 0 || n.layer_count <= 0)
        throw data_error("both checkpoints need a layer template before merging");
    if (m.layer_count != n.layer_count)
        throw data_error("layer count mismatch: " + std::to_string(m.layer_count) + " vs " +
                         std::to_string(n.layer_count));
    for (int l = 0; l < m.layer_count; ++l) {
        const auto& names_m = m.layer_names[static_cast<std::size_t>(l)];
        const auto& names_n = n.layer_names[static_cast<std::size_t>(l)];
        if (names_m != names_n)
            throw data_error("layer " + std::to_string(l) + ": tensor name mismatch");
        for (const auto& name : names_m) {
            if (m.meta(name).shape != n.meta(name).shape)
                throw data_error("layer " + std::to_string(l) + ": shape mismatch for tensor '" +
                                 name + "'");
        }
    }
}

CheckpointBuilder& CheckpointBuilder::add_f32(const std::string& name,
                                              std::vector<std::int64_t> shape,
                                              std::span<const float> values) {
    std::vector<std::uint8_t> bytes(values.size() * sizeof(float));
    std::memcpy(bytes.data(), values.data(), bytes.size());
    pending_[name] = {"F32", std::move(shape), std::move(bytes)};
    return *this;
}

CheckpointBuilder& CheckpointBuilder::add_raw(const std::string& name, const std::string& dtype,
                                              std::vector<std::int64_t> shape,
                                              std::span<const std::uint8_t> bytes) {
    pending_[name] = {dtype, std::move(shape), {bytes.begin(), bytes.end()}};
    return *this;
}

CheckpointBuilder& CheckpointBuilder::layer_template(const std::string& tmpl) {
    template_ = tmpl;
    return *this;
}

CheckpointBuilder& CheckpointBuilder::metadata(const std::string& key, const std::string& value) {
    extra_[key] = value;
    return *this;
}

Checkpoint CheckpointBuilder::build() const {
    Checkpoint ck;
    ck.extra = extra_;
    std::uint64_t offset = 0;
    for (const auto& [name, p] : pending_) {  // std::map: lexicographic packing
        TensorMeta m;
        m.dtype = p.dtype;
        m.shape = p.shape;
        m.begin = offset;
        m.end = offset + p.bytes.size();
        offset = m.end;
        ck.metas.emplace(name, std::move(m));
    }
    ck.data.resize(offset);
    for (const auto& [name, p] : pending_) {
        std::memcpy(ck.data.data() + ck.metas.at(name).begin, p.bytes.data(), p.bytes.size());
    }
    validate_metas(ck.metas, ck.data.size());
    if (!template_.empty()) set_layer_template(ck, template_);
    return ck;
}

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b) {
    if (a.data != b.data || a.extra != b.extra) return false;
    if (a.layer_count != b.layer_count || a.name_template != b.name_template) return false;
    if (a.metas.size() != b.metas.size()) return false;
    for (const auto& [name, m] : a.metas) {
        const auto it = b.metas.find(name);
        if (it == b.metas.end()) return false;
        const auto& o = it->second;
        if (m.dtype != o.dtype || m.shape != o.shape || m.begin != o.begin || m.end != o.end)
            return false;
    }
    return true;
}

}  // namespace attnmerge
