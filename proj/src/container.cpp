#include "permweave/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "permweave/model.hpp"

namespace permweave {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

std::vector<std::uint8_t> write_container(std::string_view magic, const nlohmann::json& header,
                                          std::span<const std::uint8_t> payload) {
    const std::string text = header.dump();
    std::vector<std::uint8_t> out;
    out.reserve(12 + text.size() + payload.size());
    out.insert(out.end(), magic.begin(), magic.end());
    const std::uint64_t len = text.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

ContainerView read_container(std::span<const std::uint8_t> bytes, std::string_view magic) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), magic.data(), 4) != 0)
        throw FormatError("bad magic: expected " + std::string(magic));
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[4 + i]) << (8 * i);
    if (len > bytes.size() - 12) throw FormatError("header length exceeds file size");
    ContainerView view;
    try {
        view.header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt header: ") + e.what());
    }
    if (!view.header.is_object()) throw FormatError("corrupt header: not a JSON object");
    view.payload = bytes.subspan(12 + len);
    return view;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace permweave
