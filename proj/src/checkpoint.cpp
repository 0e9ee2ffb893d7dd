#include "tdid/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tdid/error.hpp"

namespace tdid {

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t pos() const { return pos_; }

    template <typename U>
    U get_le(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }

    std::string get_string(std::size_t n) {
        need(n, "name");
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) throw ParseError(std::string("checkpoint truncated while reading ") + what, pos_);
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& entries) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_le<std::uint32_t>(out, kCheckpointVersion);
    for (const auto& e : entries) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.rank()));
        for (auto extent : e.tensor.shape()) put_le<std::uint64_t>(out, extent);
        for (float v : e.tensor.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    r.need(sizeof(kCheckpointMagic), "magic");
    if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw ParseError("bad checkpoint magic", 0);
    }
    (void)r.get_string(sizeof(kCheckpointMagic));
    const auto version_pos = r.pos();
    const auto version = r.get_le<std::uint32_t>("format version");
    if (version != kCheckpointVersion) {
        throw ParseError("unsupported checkpoint version " + std::to_string(version), version_pos);
    }
    std::vector<NamedTensor> entries;
    while (!r.at_end()) {
        const auto name_len = r.get_le<std::uint32_t>("name length");
        NamedTensor e;
        e.name = r.get_string(name_len);
        const auto rank_pos = r.pos();
        const auto rank = r.get_le<std::uint32_t>("rank");
        if (rank == 0 || rank > 8) throw ParseError("invalid tensor rank " + std::to_string(rank), rank_pos);
        Shape shape;
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto extent_pos = r.pos();
            const auto extent = r.get_le<std::uint64_t>("extent");
            if (extent == 0 || extent > (std::uint64_t{1} << 32)) {
                throw ParseError("invalid extent in entry '" + e.name + "'", extent_pos);
            }
            shape.push_back(static_cast<std::size_t>(extent));
            count *= extent;
        }
        r.need(count * 4, "tensor data");
        std::vector<float> data(count);
        for (auto& v : data) v = std::bit_cast<float>(r.get_le<std::uint32_t>("tensor data"));
        e.tensor = Tensorf::from_data(std::move(shape), std::move(data));
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
    write_file_bytes(path, encode_checkpoint(entries));
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path));
}

}  // namespace tdid
