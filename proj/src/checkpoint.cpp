#include "speechssl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace speechssl {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    }
    return v;
}

}  // namespace

const NamedTensor* CheckpointFile::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ckpt) {
    nlohmann::json header;
    header["meta"] = ckpt.meta;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        std::int64_t n = 1;
        for (int d : t.shape) n *= d;
        if (n != static_cast<std::int64_t>(t.data.size())) {
            throw CheckpointError("tensor " + t.name + " has data size inconsistent with shape");
        }
        header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data.size() * sizeof(float);
    }
    const std::string text = header.dump();
    std::string out = "MSEC";
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (const auto& t : ckpt.tensors) {
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
    // Write to a sibling file and rename so readers never see a partial file.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw CheckpointError("cannot write checkpoint: " + path.string());
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw CheckpointError("short write on checkpoint: " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto corrupt = [&](const std::string& why) {
        return CheckpointError("corrupt checkpoint: " + path.string() + ": " + why);
    };
    if (bytes.size() < 12 || bytes.compare(0, 4, "MSEC") != 0) throw corrupt("bad magic");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version mismatch: file has " + std::to_string(version) +
                              ", expected " + std::to_string(kCheckpointVersion));
    }
    const std::uint32_t header_len = get_u32(bytes, 8);
    if (12 + static_cast<std::uint64_t>(header_len) > bytes.size()) throw corrupt("truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(12, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw corrupt(e.what());
    }
    const std::size_t data_start = 12 + header_len;
    CheckpointFile out;
    try {
        out.meta = header.at("meta");
        for (const auto& entry : header.at("tensors")) {
            NamedTensor t;
            t.name = entry.at("name").get<std::string>();
            t.shape = entry.at("shape").get<std::vector<int>>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            std::int64_t n = 1;
            for (int d : t.shape) {
                if (d < 0) throw corrupt("negative dimension in " + t.name);
                n *= d;
            }
            const std::uint64_t begin = data_start + offset;
            const std::uint64_t end = begin + static_cast<std::uint64_t>(n) * sizeof(float);
            if (end > bytes.size()) throw corrupt("tensor " + t.name + " extends past end of file");
            t.data.resize(static_cast<std::size_t>(n));
            std::memcpy(t.data.data(), bytes.data() + begin, static_cast<std::size_t>(n) * sizeof(float));
            out.tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw corrupt(e.what());
    }
    return out;
}

}  // namespace speechssl
