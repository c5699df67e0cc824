#include "mrh/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "mrh/check.hpp"

namespace mrh {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'H', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kFormatVersion = 1;

void put(std::ofstream& f, const void* p, size_t n) {
    f.write(static_cast<const char*>(p), std::streamsize(n));
}
void put_u32(std::ofstream& f, uint32_t v) { put(f, &v, 4); }
void put_u64(std::ofstream& f, uint64_t v) { put(f, &v, 8); }

void get(std::ifstream& f, void* p, size_t n) {
    f.read(static_cast<char*>(p), std::streamsize(n));
    MRH_CHECK(f.good(), "checkpoint truncated");
}
uint32_t get_u32(std::ifstream& f) {
    uint32_t v;
    get(f, &v, 4);
    return v;
}
uint64_t get_u64(std::ifstream& f) {
    uint64_t v;
    get(f, &v, 8);
    return v;
}

void put_f32_tensor(std::ofstream& f, const Tensor& t) {
    std::vector<float> buf(t.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(t.data[i]);
    put(f, buf.data(), buf.size() * 4);
}

void get_f32_tensor(std::ifstream& f, Tensor& t) {
    std::vector<float> buf(t.data.size());
    get(f, buf.data(), buf.size() * 4);
    for (size_t i = 0; i < buf.size(); ++i) t.data[i] = double(buf[i]);
}

struct Header {
    uint64_t digest, step, seed, adam_t;
    uint8_t flags;
    uint32_t n_params;
};

Header read_header(std::ifstream& f, const std::string& path) {
    MRH_CHECK(f.is_open(), "cannot open checkpoint " << path);
    char magic[8];
    get(f, magic, 8);
    MRH_CHECK(std::memcmp(magic, kMagic, 8) == 0, "not a checkpoint file: " << path);
    const uint32_t ver = get_u32(f);
    MRH_CHECK(ver == kFormatVersion, "unsupported checkpoint version " << ver);
    Header h;
    h.digest = get_u64(f);
    h.step = get_u64(f);
    h.seed = get_u64(f);
    h.adam_t = get_u64(f);
    uint8_t pad[3];
    get(f, &h.flags, 1);
    get(f, pad, 3);
    h.n_params = get_u32(f);
    return h;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& m, const CheckpointMeta& meta) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    MRH_CHECK(f.is_open(), "cannot write checkpoint " << path);
    put(f, kMagic, 8);
    put_u32(f, kFormatVersion);
    put_u64(f, m.digest());
    put_u64(f, meta.step);
    put_u64(f, meta.seed);
    put_u64(f, meta.adam_t);
    const uint8_t flags = meta.has_optimizer ? 1 : 0;
    const uint8_t pad[3] = {0, 0, 0};
    put(f, &flags, 1);
    put(f, pad, 3);

    auto ps = m.params();
    put_u32(f, uint32_t(ps.size()));
    for (const Param* p : ps) {
        put_u32(f, uint32_t(p->name.size()));
        put(f, p->name.data(), p->name.size());
        put_u32(f, uint32_t(p->value.rank()));
        for (int i = 0; i < p->value.rank(); ++i) put_u32(f, uint32_t(p->value.dim(i)));
        put_f32_tensor(f, p->value);
    }
    if (meta.has_optimizer) {
        for (const Param* p : ps) {
            put_f32_tensor(f, p->m);
            put_f32_tensor(f, p->v);
        }
    }
    MRH_CHECK(f.good(), "short write on checkpoint " << path);
}

CheckpointMeta load_checkpoint(const std::string& path, Model& m, bool force) {
    std::ifstream f(path, std::ios::binary);
    Header h = read_header(f, path);
    if (!force)
        MRH_CHECK(h.digest == m.digest(),
                  "checkpoint config digest mismatch (file " << h.digest << ", model "
                                                             << m.digest() << "); pass force to override");
    MRH_CHECK(h.n_params == m.params().size(),
              "checkpoint has " << h.n_params << " tensors, model has " << m.params().size());

    std::vector<Param*> order;
    order.reserve(h.n_params);
    for (uint32_t k = 0; k < h.n_params; ++k) {
        const uint32_t len = get_u32(f);
        MRH_CHECK(len < 256, "implausible parameter name length");
        std::string name(len, '\0');
        get(f, name.data(), len);
        Param& p = m.param(name);
        const uint32_t rank = get_u32(f);
        MRH_CHECK(int(rank) == p.value.rank(), "rank mismatch for " << name);
        for (uint32_t i = 0; i < rank; ++i)
            MRH_CHECK(int(get_u32(f)) == p.value.dim(int(i)), "shape mismatch for " << name);
        get_f32_tensor(f, p.value);
        order.push_back(&p);
    }
    CheckpointMeta meta;
    meta.step = h.step;
    meta.seed = h.seed;
    meta.adam_t = h.adam_t;
    meta.has_optimizer = (h.flags & 1) != 0;
    if (meta.has_optimizer) {
        for (Param* p : order) {
            get_f32_tensor(f, p->m);
            get_f32_tensor(f, p->v);
        }
    }
    return meta;
}

CheckpointHeader peek_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    Header h = read_header(f, path);
    CheckpointHeader out;
    out.digest = h.digest;
    out.meta.step = h.step;
    out.meta.seed = h.seed;
    out.meta.adam_t = h.adam_t;
    out.meta.has_optimizer = (h.flags & 1) != 0;
    return out;
}

}  // namespace mrh
