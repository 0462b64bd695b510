#include "ffgan/container.hpp"

#include "ffgan/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace ffgan {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'F', 'T', '1'};

template <class T>
void put(std::string& out, T value)
{
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary)
    {
        if (!in_) {
            throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
        }
        in_.seekg(0, std::ios::end);
        size_ = static_cast<std::uint64_t>(in_.tellg());
        in_.seekg(0);
    }

    void read_header()
    {
        char magic[4];
        if (!take(magic, 4)) {
            throw FormatError(FormatError::Kind::truncated, path_.string() + ": truncated before magic");
        }
        if (std::memcmp(magic, kMagic, 4) != 0) {
            throw FormatError(FormatError::Kind::bad_magic, path_.string() + ": not a flat-tensor container");
        }
        std::uint32_t version = 0;
        if (!take(&version, sizeof version)) {
            throw FormatError(FormatError::Kind::truncated, path_.string() + ": truncated version field");
        }
        if (version != kContainerVersion) {
            throw FormatError(FormatError::Kind::bad_version,
                              path_.string() + ": unsupported version " + std::to_string(version));
        }
    }

    bool at_end() { return position() == size_; }

    RecordHeader next_header()
    {
        RecordHeader header;
        std::uint16_t name_len = 0;
        need(&name_len, sizeof name_len);
        header.name.resize(name_len);
        need(header.name.data(), name_len);
        std::uint8_t rank = 0;
        need(&rank, sizeof rank);
        header.shape.resize(rank);
        for (std::size_t i = 0; i < rank; ++i) {
            std::uint32_t extent = 0;
            need(&extent, sizeof extent);
            header.shape[i] = extent;
        }
        header.payload_offset = position();
        const std::uint64_t bytes = static_cast<std::uint64_t>(numel(header.shape)) * sizeof(double);
        if (header.payload_offset + bytes > size_) {
            throw FormatError(FormatError::Kind::truncated,
                              path_.string() + ": record '" + header.name + "' payload runs past end of file");
        }
        return header;
    }

    void skip_payload(const RecordHeader& header)
    {
        in_.seekg(static_cast<std::streamoff>(header.payload_offset + numel(header.shape) * sizeof(double)));
    }

    Tensor payload(const RecordHeader& header)
    {
        Tensor t(header.shape);
        need(t.data().data(), t.size() * sizeof(double));
        return t;
    }

private:
    std::uint64_t position() { return static_cast<std::uint64_t>(in_.tellg()); }

    bool take(void* dst, std::size_t n)
    {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        return static_cast<std::size_t>(in_.gcount()) == n;
    }

    void need(void* dst, std::size_t n)
    {
        if (!take(dst, n)) {
            throw FormatError(FormatError::Kind::truncated, path_.string() + ": truncated record");
        }
    }

    std::filesystem::path path_;
    std::ifstream in_;
    std::uint64_t size_ = 0;
};

} // namespace

std::string encode_container(const std::vector<Record>& records)
{
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kContainerVersion);
    for (const Record& r : records) {
        if (r.name.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw InvalidArgument("container: record name too long");
        }
        if (r.tensor.rank() > std::numeric_limits<std::uint8_t>::max()) {
            throw InvalidArgument("container: rank too large for '" + r.name + "'");
        }
        put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
        out += r.name;
        put<std::uint8_t>(out, static_cast<std::uint8_t>(r.tensor.rank()));
        for (std::size_t extent : r.tensor.shape()) {
            if (extent > std::numeric_limits<std::uint32_t>::max()) {
                throw InvalidArgument("container: extent too large for '" + r.name + "'");
            }
            put<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
        }
        out.append(reinterpret_cast<const char*>(r.tensor.data().data()), r.tensor.size() * sizeof(double));
    }
    return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes)
{
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw FormatError(FormatError::Kind::io, "cannot write " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw FormatError(FormatError::Kind::io, "write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw FormatError(FormatError::Kind::io, "cannot rename into " + path.string() + ": " + ec.message());
    }
}

void write_container(const std::filesystem::path& path, const std::vector<Record>& records)
{
    write_file_atomic(path, encode_container(records));
}

std::vector<Record> read_container(const std::filesystem::path& path)
{
    Reader reader(path);
    reader.read_header();
    std::vector<Record> records;
    while (!reader.at_end()) {
        RecordHeader header = reader.next_header();
        Tensor t = reader.payload(header);
        records.push_back({std::move(header.name), std::move(t)});
    }
    return records;
}

std::vector<RecordHeader> scan_container(const std::filesystem::path& path)
{
    Reader reader(path);
    reader.read_header();
    std::vector<RecordHeader> headers;
    while (!reader.at_end()) {
        headers.push_back(reader.next_header());
        reader.skip_payload(headers.back());
    }
    return headers;
}

const Tensor& find_record(const std::vector<Record>& records, const std::string& name)
{
    for (const Record& r : records) {
        if (r.name == name) {
            return r.tensor;
        }
    }
    throw FormatError(FormatError::Kind::missing_record, "missing record '" + name + "'");
}

} // namespace ffgan
