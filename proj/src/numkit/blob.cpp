#include "gridloc/numkit/blob.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "gridloc/errors.hpp"
#include "gridloc/numkit/rng.hpp"

namespace gridloc::numkit {

namespace {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

} // namespace

void write_blob(const std::string& manifest_path, const std::string& blob_path,
                const std::map<std::string, Tensor>& tensors, const nlohmann::json& meta) {
    std::vector<unsigned char> bytes;
    nlohmann::json jt = nlohmann::json::object();
    std::int64_t off = 0;
    for (const auto& [name, t] : tensors) {
        jt[name] = {{"shape", t.shape}, {"dtype", "f32"}, {"byte_offset", off}};
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            std::uint32_t u;
            float f = t[i];
            std::memcpy(&u, &f, 4);
            bytes.push_back(static_cast<unsigned char>(u & 0xff));
            bytes.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
            bytes.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
            bytes.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
        }
        off += t.numel() * 4;
    }
    const std::uint64_t sum = fnv1a64(bytes.data(), bytes.size());

    nlohmann::json manifest = {
        {"format", "gridloc-blob-v1"},
        {"blob", std::filesystem::path(blob_path).filename().string()},
        {"blob_bytes", off},
        {"checksum_fnv1a64", hex64(sum)},
        {"meta", meta},
        {"tensors", jt},
    };

    std::ofstream bf(blob_path, std::ios::binary | std::ios::trunc);
    if (!bf) throw ValidationError("cannot open '" + blob_path + "' for writing");
    bf.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!bf) throw ValidationError("write failed for '" + blob_path + "'");
    bf.close();

    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw ValidationError("cannot open '" + manifest_path + "' for writing");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw ValidationError("write failed for '" + manifest_path + "'");
}

std::map<std::string, Tensor> read_blob(const std::string& manifest_path,
                                        nlohmann::json* meta_out) {
    std::ifstream mf(manifest_path);
    if (!mf) throw ValidationError("cannot open manifest '" + manifest_path + "'");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed manifest '" + manifest_path + "': " + e.what());
    }
    if (manifest.value("format", "") != "gridloc-blob-v1")
        throw ValidationError("'" + manifest_path + "' is not a gridloc-blob-v1 manifest");

    const std::string blob_name = manifest.at("blob").get<std::string>();
    const std::filesystem::path blob_path =
        std::filesystem::path(manifest_path).parent_path() / blob_name;
    std::ifstream bf(blob_path, std::ios::binary);
    if (!bf) throw ValidationError("cannot open blob '" + blob_path.string() + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bf)),
                                     std::istreambuf_iterator<char>());

    const std::int64_t expect_bytes = manifest.at("blob_bytes").get<std::int64_t>();
    if (static_cast<std::int64_t>(bytes.size()) != expect_bytes)
        throw ValidationError("blob '" + blob_path.string() + "' has " +
                              std::to_string(bytes.size()) + " bytes, manifest says " +
                              std::to_string(expect_bytes));
    const std::string sum = hex64(fnv1a64(bytes.data(), bytes.size()));
    if (sum != manifest.at("checksum_fnv1a64").get<std::string>())
        throw NumericError("checksum mismatch in '" + blob_path.string() + "'");

    std::map<std::string, Tensor> out;
    for (const auto& [name, entry] : manifest.at("tensors").items()) {
        if (entry.at("dtype").get<std::string>() != "f32")
            throw ValidationError("tensor '" + name + "' has unsupported dtype");
        std::vector<std::int64_t> shape = entry.at("shape").get<std::vector<std::int64_t>>();
        Tensor t = Tensor::zeros(shape);
        const std::int64_t off = entry.at("byte_offset").get<std::int64_t>();
        if (off < 0 || off + t.numel() * 4 > expect_bytes)
            throw ValidationError("tensor '" + name + "' extends past end of blob");
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const std::size_t b = static_cast<std::size_t>(off + i * 4);
            const std::uint32_t u = static_cast<std::uint32_t>(bytes[b]) |
                                    (static_cast<std::uint32_t>(bytes[b + 1]) << 8) |
                                    (static_cast<std::uint32_t>(bytes[b + 2]) << 16) |
                                    (static_cast<std::uint32_t>(bytes[b + 3]) << 24);
            float f;
            std::memcpy(&f, &u, 4);
            t[i] = f;
        }
        out.emplace(name, std::move(t));
    }
    if (meta_out != nullptr) *meta_out = manifest.value("meta", nlohmann::json::object());
    return out;
}

} // namespace gridloc::numkit
