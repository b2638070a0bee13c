#include "dn/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace dn {

namespace {

constexpr char kMagic[4] = {'D', 'N', 'C', 'K'};

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_raw(std::istream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return in.gcount() == sizeof(T);
}

}  // namespace

void write_tensor_record(std::ostream& out, const std::string& name,
                         const std::vector<std::int64_t>& shape, const real* data) {
    write_raw(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw(out, static_cast<std::uint32_t>(shape.size()));
    std::int64_t n = 1;
    for (auto d : shape) {
        write_raw(out, static_cast<std::uint32_t>(d));
        n *= d;
    }
    std::vector<float> buf(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

bool read_tensor_record(std::istream& in, NamedTensorRecord& rec) {
    std::uint32_t name_len = 0;
    if (!read_raw(in, name_len)) return false;  // clean EOF
    rec.name.resize(name_len);
    in.read(rec.name.data(), name_len);
    check(in.gcount() == static_cast<std::streamsize>(name_len), "checkpoint: truncated name");
    std::uint32_t rank = 0;
    check(read_raw(in, rank), "checkpoint: truncated rank");
    check(rank <= 8, "checkpoint: implausible rank");
    rec.shape.resize(rank);
    std::int64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d = 0;
        check(read_raw(in, d), "checkpoint: truncated dims");
        rec.shape[i] = static_cast<std::int64_t>(d);
        n *= rec.shape[i];
    }
    std::vector<float> buf(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    check(in.gcount() == static_cast<std::streamsize>(buf.size() * sizeof(float)),
          "checkpoint: truncated payload for " + rec.name);
    rec.data.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) rec.data[static_cast<std::size_t>(i)] = static_cast<real>(buf[static_cast<std::size_t>(i)]);
    return true;
}

void save_checkpoint(const std::string& path, const ParamStore& params, std::uint64_t fingerprint) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "checkpoint: cannot write " + path);
    out.write(kMagic, 4);
    write_raw(out, kCheckpointVersion);
    write_raw(out, fingerprint);
    for (std::size_t i = 0; i < params.params.size(); ++i)
        write_tensor_record(out, params.names[i], params.params[i].shape(), params.params[i].data());
    check(out.good(), "checkpoint: write failed for " + path);
}

std::uint64_t load_checkpoint_records(const std::string& path, std::vector<NamedTensorRecord>& recs) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    check(in.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0,
          "checkpoint: bad magic in " + path);
    std::uint32_t version = 0;
    check(read_raw(in, version), "checkpoint: truncated header");
    check(version == kCheckpointVersion, "checkpoint: unsupported format version");
    std::uint64_t fingerprint = 0;
    check(read_raw(in, fingerprint), "checkpoint: truncated fingerprint");
    NamedTensorRecord rec;
    while (read_tensor_record(in, rec)) recs.push_back(rec);
    return fingerprint;
}

std::uint64_t load_checkpoint(const std::string& path, ParamStore& params) {
    std::vector<NamedTensorRecord> recs;
    std::uint64_t fp = load_checkpoint_records(path, recs);
    for (std::size_t i = 0; i < params.params.size(); ++i) {
        const std::string& want = params.names[i];
        bool found = false;
        for (const auto& rec : recs) {
            if (rec.name != want) continue;
            check(rec.shape == params.params[i].shape(),
                  "checkpoint: shape mismatch for " + want + " in " + path);
            params.params[i].vec() = rec.data;
            found = true;
            break;
        }
        check(found, "checkpoint: missing parameter " + want + " in " + path);
    }
    return fp;
}

}  // namespace dn
