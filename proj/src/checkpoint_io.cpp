#include <cstring>

#include "permweave/container.hpp"
#include "permweave/model.hpp"

namespace permweave {

namespace {
constexpr std::string_view kMagic = "PWC1";
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    validate_checkpoint(ckpt);
    std::map<std::string, std::vector<std::size_t>> shapes;
    for (auto& spec : parameter_layout(ckpt.config)) shapes[spec.name] = spec.shape;

    nlohmann::json tensors = nlohmann::json::object();
    std::vector<std::uint8_t> payload;
    for (const auto& [name, m] : ckpt.tensors) {  // std::map iterates in sorted-name order
        const std::uint64_t len = m.size() * sizeof(float);
        tensors[name] = {{"shape", shapes.at(name)}, {"offset", payload.size()}, {"len", len}};
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(m.values().data());
        payload.insert(payload.end(), bytes, bytes + len);
    }
    nlohmann::json header = {{"config", ckpt.config}, {"tensors", tensors}};
    return write_container(kMagic, header, payload);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    const ContainerView view = read_container(bytes, kMagic);
    Checkpoint ckpt;
    if (!view.header.contains("config") || !view.header.contains("tensors") ||
        !view.header["tensors"].is_object())
        throw FormatError("corrupt header: expected 'config' and 'tensors'");
    try {
        ckpt.config = view.header["config"].get<TransformerConfig>();
        ckpt.config.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("corrupt header: ") + e.what());
    }

    const auto& entries = view.header["tensors"];
    for (const auto& spec : parameter_layout(ckpt.config)) {
        if (!entries.contains(spec.name)) throw FormatError("header is missing tensor '" + spec.name + "'");
        const auto& e = entries[spec.name];
        std::vector<std::size_t> shape;
        std::uint64_t offset = 0, len = 0;
        try {
            shape = e.at("shape").get<std::vector<std::size_t>>();
            offset = e.at("offset").get<std::uint64_t>();
            len = e.at("len").get<std::uint64_t>();
        } catch (const nlohmann::json::exception&) {
            throw FormatError("tensor '" + spec.name + "' has a malformed header entry");
        }
        if (shape != spec.shape) throw FormatError("tensor '" + spec.name + "' shape does not match config");
        std::size_t count = 1;
        for (auto s : shape) count *= s;
        if (len != count * sizeof(float))
            throw FormatError("tensor '" + spec.name + "' declares length " + std::to_string(len) +
                              " bytes, expected " + std::to_string(count * sizeof(float)));
        if (offset > view.payload.size() || len > view.payload.size() - offset)
            throw FormatError("tensor '" + spec.name + "' data is truncated");
        std::vector<float> data(count);
        std::memcpy(data.data(), view.payload.data() + offset, len);
        const std::size_t rows = shape.size() == 1 ? 1 : shape[0];
        const std::size_t cols = shape.size() == 1 ? shape[0] : shape[1];
        ckpt.tensors.emplace(spec.name, Matrix(rows, cols, std::move(data)));
    }
    if (entries.size() != ckpt.tensors.size()) {
        for (const auto& [name, _] : entries.items())
            if (!ckpt.tensors.contains(name)) throw FormatError("header has unexpected tensor '" + name + "'");
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path));
}

}  // namespace permweave
