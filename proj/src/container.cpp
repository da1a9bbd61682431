#include "qalora/container.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>

#include <json.hpp>

namespace qalora::container {

namespace {

using ordered_json = nlohmann::ordered_json;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
    return static_cast<std::uint32_t>(bytes[at]) |
           (static_cast<std::uint32_t>(bytes[at + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[at + 2]) << 16) |
           (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
    }
}

double get_f64(const std::uint8_t* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
    }
}

float get_f32(const std::uint8_t* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
        bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    }
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

std::vector<std::uint8_t> fp_blob(const Matrix& m) {
    std::vector<std::uint8_t> out;
    out.reserve(m.data().size() * 8);
    for (double v : m.data()) {
        put_f64(out, v);
    }
    return out;
}

Matrix parse_fp_blob(std::span<const std::uint8_t> blob, std::size_t rows,
                     std::size_t cols) {
    if (blob.size() != fp_tensor_bytes(rows, cols)) {
        throw FormatError("fp tensor blob has " + std::to_string(blob.size()) +
                          " bytes, expected " +
                          std::to_string(fp_tensor_bytes(rows, cols)));
    }
    std::vector<double> data(rows * cols);
    for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = get_f64(blob.data() + 8 * i);
    }
    try {
        return Matrix(rows, cols, std::move(data));
    } catch (const Error& e) {
        throw FormatError(std::string("fp tensor: ") + e.what());
    }
}

std::vector<std::uint8_t> quant_blob(const QuantizedMatrix& q) {
    std::vector<std::uint8_t> out;
    out.reserve(quant_tensor_bytes(q.d_in(), q.d_out(), q.bits(), q.group_size()));
    out.insert(out.end(), q.packed().begin(), q.packed().end());
    // Scale/zero factors are stored at deployment width (32-bit); the loader
    // widens them back to 64-bit for computation.
    for (double v : q.scales().data()) {
        const float f = static_cast<float>(v);
        if (!(f > 0.0f) || !std::isfinite(f)) {
            throw FormatError("scale factor " + std::to_string(v) +
                              " is not representable as a positive 32-bit float");
        }
        put_f32(out, f);
    }
    for (double v : q.zeros().data()) {
        const float f = static_cast<float>(v);
        if (!std::isfinite(f)) {
            throw FormatError("zero factor " + std::to_string(v) +
                              " overflows a 32-bit float");
        }
        put_f32(out, f);
    }
    return out;
}

QuantizedMatrix parse_quant_blob(std::span<const std::uint8_t> blob, std::size_t d_in,
                                 std::size_t d_out, int bits, std::size_t group_size) {
    if (!valid_bits(bits) || group_size == 0 || d_in == 0 || d_out == 0 ||
        d_in % group_size != 0) {
        throw FormatError("quant tensor has invalid bits/group_size/shape");
    }
    if (blob.size() != quant_tensor_bytes(d_in, d_out, bits, group_size)) {
        throw FormatError("quant tensor blob has " + std::to_string(blob.size()) +
                          " bytes, expected " +
                          std::to_string(quant_tensor_bytes(d_in, d_out, bits, group_size)));
    }
    const std::size_t bytes_per_column = (d_in * static_cast<std::size_t>(bits) + 7) / 8;
    const std::size_t codes_bytes = bytes_per_column * d_out;
    const std::size_t num_groups = d_in / group_size;
    const std::size_t n_factors = num_groups * d_out;

    std::vector<std::uint8_t> packed(blob.begin(),
                                     blob.begin() + static_cast<std::ptrdiff_t>(codes_bytes));
    std::vector<double> scales(n_factors), zeros(n_factors);
    const std::uint8_t* p = blob.data() + codes_bytes;
    for (std::size_t i = 0; i < n_factors; ++i, p += 4) {
        scales[i] = static_cast<double>(get_f32(p));
    }
    for (std::size_t i = 0; i < n_factors; ++i, p += 4) {
        zeros[i] = static_cast<double>(get_f32(p));
    }
    try {
        return QuantizedMatrix(d_in, d_out, bits, group_size, std::move(packed),
                               Matrix(num_groups, d_out, std::move(scales)),
                               Matrix(num_groups, d_out, std::move(zeros)));
    } catch (const Error& e) {
        throw FormatError(std::string("quant tensor: ") + e.what());
    }
}

const char* activation_name(Activation a) {
    return a == Activation::relu ? "relu" : "identity";
}

Activation activation_from(const std::string& s) {
    if (s == "relu") {
        return Activation::relu;
    }
    if (s == "identity") {
        return Activation::identity;
    }
    throw FormatError("unknown activation \"" + s + "\"");
}

const char* loss_name(LossKind k) {
    return k == LossKind::cross_entropy ? "cross_entropy" : "mse";
}

LossKind loss_from(const std::string& s) {
    if (s == "mse") {
        return LossKind::mse;
    }
    if (s == "cross_entropy") {
        return LossKind::cross_entropy;
    }
    throw FormatError("unknown loss kind \"" + s + "\"");
}

struct TensorEntry {
    std::string name;
    std::string kind;
    std::vector<std::size_t> shape;
    int bits = 0;
    std::size_t group_size = 0;
    std::vector<std::uint8_t> blob;
};

} // namespace

std::vector<std::uint8_t> serialize(const ToyModel& model) {
    model.validate();

    ordered_json layers_meta = ordered_json::array();
    std::vector<TensorEntry> tensors;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const ModelLayer& layer = model.layers[i];
        const std::string name = "layer" + std::to_string(i);
        ordered_json meta;
        meta["name"] = name;
        meta["kind"] = layer.is_quant() ? "quant" : "fp";
        meta["activation"] = activation_name(layer.activation);
        meta["adapter"] = layer.adapter().has_value();
        if (layer.adapter()) {
            meta["scale"] = layer.adapter()->s;
        }
        layers_meta.push_back(std::move(meta));

        if (layer.is_quant()) {
            const QuantizedMatrix& q = std::get<QuantLinearLayer>(layer.unit).base;
            tensors.push_back({name + ".base",
                               "quant",
                               {q.d_in(), q.d_out()},
                               q.bits(),
                               q.group_size(),
                               quant_blob(q)});
        } else {
            const Matrix& w = std::get<FpLayer>(layer.unit).weights;
            tensors.push_back(
                {name + ".base", "fp", {w.rows(), w.cols()}, 0, 0, fp_blob(w)});
        }
        if (layer.adapter()) {
            const AdapterPair& ad = *layer.adapter();
            tensors.push_back({name + ".adapterA",
                               "adapterA",
                               {ad.a.rows(), ad.a.cols()},
                               0,
                               0,
                               fp_blob(ad.a)});
            tensors.push_back({name + ".adapterB",
                               "adapterB",
                               {ad.b.rows(), ad.b.cols()},
                               0,
                               0,
                               fp_blob(ad.b)});
        }
    }

    // Offsets are payload-relative; the payload base is 8-aligned, so an
    // 8-aligned relative offset is 8-aligned in the file as well.
    ordered_json tensor_table = ordered_json::array();
    std::size_t cursor = 0;
    for (const TensorEntry& t : tensors) {
        cursor = align8(cursor);
        ordered_json entry;
        entry["name"] = t.name;
        entry["kind"] = t.kind;
        entry["shape"] = t.shape;
        entry["bits"] = t.bits;
        entry["group_size"] = t.group_size;
        entry["offset"] = cursor;
        entry["length"] = t.blob.size();
        tensor_table.push_back(std::move(entry));
        cursor += t.blob.size();
    }

    ordered_json header;
    header["model"] = {{"loss", loss_name(model.loss)}, {"layers", std::move(layers_meta)}};
    header["tensors"] = std::move(tensor_table);
    const std::string header_text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(align8(12 + header_text.size()) + cursor);
    out.push_back('Q');
    out.push_back('A');
    out.push_back('L');
    out.push_back('M');
    put_u32(out, kFormatVersion);
    put_u32(out, static_cast<std::uint32_t>(header_text.size()));
    out.insert(out.end(), header_text.begin(), header_text.end());
    out.resize(align8(out.size()), 0);

    const std::size_t payload_base = out.size();
    for (const TensorEntry& t : tensors) {
        out.resize(payload_base + align8(out.size() - payload_base), 0);
        out.insert(out.end(), t.blob.begin(), t.blob.end());
    }
    return out;
}

ToyModel parse(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12 || bytes[0] != 'Q' || bytes[1] != 'A' || bytes[2] != 'L' ||
        bytes[3] != 'M') {
        throw FormatError("not a QALM container");
    }
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kFormatVersion) {
        throw FormatError("unsupported container version " + std::to_string(version));
    }
    const std::size_t header_len = get_u32(bytes, 8);
    if (12 + header_len > bytes.size()) {
        throw FormatError("header length exceeds file size");
    }
    ordered_json header;
    try {
        header = ordered_json::parse(bytes.begin() + 12,
                                     bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid container header: ") + e.what());
    }

    const std::size_t payload_base = align8(12 + header_len);
    if (payload_base > bytes.size()) {
        throw FormatError("container truncated before payload");
    }
    const std::span<const std::uint8_t> payload = bytes.subspan(payload_base);

    try {
        struct TensorRef {
            std::string kind;
            std::vector<std::size_t> shape;
            int bits;
            std::size_t group_size;
            std::size_t offset;
            std::size_t length;
        };
        std::map<std::string, TensorRef> table;
        std::vector<std::pair<std::size_t, std::size_t>> extents;
        for (const auto& t : header.at("tensors")) {
            TensorRef ref;
            ref.kind = t.at("kind").get<std::string>();
            ref.shape = t.at("shape").get<std::vector<std::size_t>>();
            ref.bits = t.at("bits").get<int>();
            ref.group_size = t.at("group_size").get<std::size_t>();
            ref.offset = t.at("offset").get<std::size_t>();
            ref.length = t.at("length").get<std::size_t>();
            if (ref.shape.size() != 2) {
                throw FormatError("tensor shape must have two dimensions");
            }
            if (ref.offset + ref.length > payload.size()) {
                throw FormatError("tensor \"" + t.at("name").get<std::string>() +
                                  "\" extends past end of payload");
            }
            extents.emplace_back(ref.offset, ref.length);
            if (!table.emplace(t.at("name").get<std::string>(), std::move(ref)).second) {
                throw FormatError("duplicate tensor name");
            }
        }
        std::sort(extents.begin(), extents.end());
        for (std::size_t i = 1; i < extents.size(); ++i) {
            if (extents[i].first < extents[i - 1].first + extents[i - 1].second) {
                throw FormatError("tensor blobs overlap");
            }
        }

        auto blob_of = [&](const std::string& name, const char* want_kind) {
            auto it = table.find(name);
            if (it == table.end()) {
                throw FormatError("layer references missing tensor \"" + name + "\"");
            }
            if (it->second.kind != want_kind) {
                throw FormatError("tensor \"" + name + "\" has kind " + it->second.kind +
                                  ", expected " + want_kind);
            }
            return std::make_pair(payload.subspan(it->second.offset, it->second.length),
                                  &it->second);
        };

        ToyModel model;
        model.loss = loss_from(header.at("model").at("loss").get<std::string>());
        for (const auto& lm : header.at("model").at("layers")) {
            const std::string name = lm.at("name").get<std::string>();
            const std::string kind = lm.at("kind").get<std::string>();
            const Activation act = activation_from(lm.at("activation").get<std::string>());
            const bool has_adapter = lm.at("adapter").get<bool>();

            std::optional<AdapterPair> adapter;
            if (has_adapter) {
                const double s = lm.at("scale").get<double>();
                auto [ablob, aref] = blob_of(name + ".adapterA", "adapterA");
                auto [bblob, bref] = blob_of(name + ".adapterB", "adapterB");
                Matrix a = parse_fp_blob(ablob, aref->shape[0], aref->shape[1]);
                Matrix b = parse_fp_blob(bblob, bref->shape[0], bref->shape[1]);
                adapter.emplace(std::move(a), std::move(b), s);
            }

            ModelLayer layer;
            layer.activation = act;
            if (kind == "quant") {
                auto [blob, ref] = blob_of(name + ".base", "quant");
                QuantizedMatrix q = parse_quant_blob(blob, ref->shape[0], ref->shape[1],
                                                     ref->bits, ref->group_size);
                layer.unit = QuantLinearLayer(std::move(q), std::move(adapter));
            } else if (kind == "fp") {
                auto [blob, ref] = blob_of(name + ".base", "fp");
                FpLayer fp{parse_fp_blob(blob, ref->shape[0], ref->shape[1]),
                           std::move(adapter)};
                if (fp.adapter && fp.adapter->a.rows() != fp.weights.rows()) {
                    throw FormatError("fp adapter A rows do not match layer d_in");
                }
                layer.unit = std::move(fp);
            } else {
                throw FormatError("unknown layer kind \"" + kind + "\"");
            }
            model.layers.push_back(std::move(layer));
        }
        model.validate();
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid container header: ") + e.what());
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        throw FormatError(e.what());
    }
}

void save(const ToyModel& model, const std::filesystem::path& path) {
    const auto bytes = serialize(model);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot write model file " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError("short write to model file " + path.string());
    }
}

ToyModel load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open model file " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return parse(bytes);
}

} // namespace qalora::container
