#include "dafdft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

namespace dafdft {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using Code = CheckpointError::Code;

class Writer {
public:
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void text(const std::string& s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void raw(const void* data, std::size_t n)
    {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::span<const std::uint8_t> take(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n)
            throw CheckpointError(Code::Truncated, std::string("checkpoint truncated while reading ") + what);
        auto out = bytes_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    std::uint32_t u32(const char* what)
    {
        auto b = take(4, what);
        return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
               static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
    }
    std::string text(const char* what)
    {
        const auto n = u32(what);
        auto b = take(n, what);
        return {b.begin(), b.end()};
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const
{
    for (const auto& t : tensors)
        if (t.name == name) return &t.tensor;
    return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint)
{
    Writer w;
    w.raw("DAFT", 4);
    w.u32(kCheckpointVersion);
    w.text(checkpoint.metadata.dump());
    w.u32(static_cast<std::uint32_t>(checkpoint.tensors.size()));
    for (const auto& [name, tensor] : checkpoint.tensors) {
        w.text(name);
        w.u32(static_cast<std::uint32_t>(tensor.rank()));
        for (Index d : tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.u32(kDtypeFloat32);
        w.raw(tensor.data().data(), static_cast<std::size_t>(tensor.numel()) * sizeof(float));
    }
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes)
{
    Reader r(bytes);
    auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), "DAFT", 4) != 0) throw CheckpointError(Code::BadMagic, "not a checkpoint: bad magic");
    const auto version = r.u32("version");
    if (version != kCheckpointVersion)
        throw CheckpointError(Code::UnsupportedVersion, "unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    const std::string meta = r.text("metadata");
    try {
        ckpt.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Code::Malformed, std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }

    const auto count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor entry;
        entry.name = r.text("tensor name");
        const auto rank = r.u32("tensor rank");
        if (rank > 8) throw CheckpointError(Code::Malformed, "tensor '" + entry.name + "' has implausible rank");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto dim = r.u32("tensor dims");
            if (dim == 0) throw CheckpointError(Code::Malformed, "tensor '" + entry.name + "' has a zero dimension");
            shape.push_back(dim);
        }
        const auto dtype = r.u32("tensor dtype");
        if (dtype != kDtypeFloat32)
            throw CheckpointError(Code::Malformed, "tensor '" + entry.name + "' has unknown dtype " + std::to_string(dtype));
        const Index n = element_count(shape);
        auto payload = r.take(static_cast<std::size_t>(n) * sizeof(float), "tensor payload");
        Buffer<float> data(n);
        std::memcpy(data.data(), payload.data(), payload.size());
        entry.tensor = Tensor(std::move(shape), std::move(data));
        ckpt.tensors.push_back(std::move(entry));
    }
    if (!r.done()) throw CheckpointError(Code::Malformed, "trailing bytes after checkpoint tensor table");
    return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path)
{
    const auto bytes = encode_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Code::Io, "cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(Code::Io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(Code::Io, "cannot read checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

void restore_tensors(const Checkpoint& checkpoint, const std::vector<NamedTensor>& targets)
{
    std::map<std::string, const Tensor*> stored;
    for (const auto& [name, tensor] : checkpoint.tensors)
        if (!stored.emplace(name, &tensor).second)
            throw CheckpointError(Code::DuplicateParameter, "checkpoint holds parameter '" + name + "' more than once");

    std::set<std::string> expected;
    for (const auto& t : targets) {
        expected.insert(t.name);
        auto it = stored.find(t.name);
        if (it == stored.end()) throw CheckpointError(Code::MissingParameter, "checkpoint is missing parameter '" + t.name + "'");
        if (it->second->shape() != t.tensor.shape())
            throw CheckpointError(Code::ShapeMismatch, "parameter '" + t.name + "' has shape " +
                                                           to_string(it->second->shape()) + ", expected " +
                                                           to_string(t.tensor.shape()));
    }
    for (const auto& [name, tensor] : stored)
        if (!expected.count(name))
            throw CheckpointError(Code::ExtraParameter, "checkpoint holds unexpected parameter '" + name + "'");

    for (const auto& t : targets) {
        Tensor target = t.tensor;
        target.data() = stored.at(t.name)->data();
    }
}

bool bit_identical(const Checkpoint& a, const Checkpoint& b)
{
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        const auto& x = a.tensors[i];
        const auto& y = b.tensors[i];
        if (x.name != y.name || x.tensor.shape() != y.tensor.shape()) return false;
        if (std::memcmp(x.tensor.data().data(), y.tensor.data().data(),
                        static_cast<std::size_t>(x.tensor.numel()) * sizeof(float)) != 0)
            return false;
    }
    return true;
}

}  // namespace dafdft
