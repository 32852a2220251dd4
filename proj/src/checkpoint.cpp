// SPDX-License-Identifier: Apache-2.0
#include "himar/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "himar/errors.hpp"
#include "himar/format.hpp"

namespace himar {

namespace {

constexpr char kMagic[4] = {'H', 'I', 'M', 'R'};

void write_table(std::ostream& os, const std::vector<std::vector<double>>& table) {
    le::write_u32(os, static_cast<std::uint32_t>(table.size()));
    for (const auto& row : table) {
        le::write_u64(os, row.size());
        for (double x : row) le::write_f64(os, x);
    }
}

std::vector<std::vector<double>> read_table(std::istream& is) {
    const std::uint32_t n = le::read_u32(is);
    std::vector<std::vector<double>> table(n);
    for (auto& row : table) {
        const std::uint64_t len = le::read_u64(is);
        if (len > (1ull << 32)) throw FormatError("checkpoint table row is implausibly long");
        row.resize(len);
        for (double& x : row) x = le::read_f64(is);
    }
    return table;
}

void check_table(const std::vector<std::vector<double>>& table, const Checkpoint& ck, const char* what) {
    if (table.size() != ck.shapes.size()) throw FormatError(std::string("checkpoint ") + what + " table has the wrong number of entries");
    for (std::size_t i = 0; i < table.size(); ++i) {
        if (table[i].size() != numel(ck.shapes[i])) throw FormatError(std::string("checkpoint ") + what + " entry " + ck.names[i] + " has the wrong length");
    }
}

}  // namespace

Checkpoint capture_checkpoint(const RunConfig& config, const HiMarModel& model, const NormStats& stats, const Trainer* trainer) {
    Checkpoint ck;
    ck.config = config;
    ck.config.model = model.cfg;
    ck.stats = stats;
    for (const auto& p : model.store.params()) {
        ck.names.push_back(p.name);
        ck.shapes.push_back(p.tensor.shape());
    }
    ck.params = model.store.snapshot();
    if (trainer) {
        ck.ema = trainer->ema.shadow;
        ck.adam_t = trainer->opt.t;
        ck.adam_m = trainer->opt.m;
        ck.adam_v = trainer->opt.v;
        ck.seed = trainer->cfg.seed;
        ck.step = trainer->steps_done;
        ck.wall_s = trainer->wall_s;
    } else {
        ck.ema = ck.params;
        for (const auto& row : ck.params) {
            ck.adam_m.emplace_back(row.size(), 0.0);
            ck.adam_v.emplace_back(row.size(), 0.0);
        }
        ck.seed = config.train.seed;
    }
    return ck;
}

std::string encode_checkpoint(const Checkpoint& ck) {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, 4);
    le::write_u32(os, kCheckpointVersion);
    le::write_string(os, ck.config.serialize());
    le::write_u32(os, static_cast<std::uint32_t>(ck.stats.channels()));
    for (std::size_t c = 0; c < ck.stats.channels(); ++c) {
        le::write_f64(os, ck.stats.mean[c]);
        le::write_f64(os, ck.stats.stddev[c]);
    }
    le::write_u32(os, static_cast<std::uint32_t>(ck.names.size()));
    for (std::size_t i = 0; i < ck.names.size(); ++i) {
        le::write_string(os, ck.names[i]);
        le::write_u32(os, static_cast<std::uint32_t>(ck.shapes[i].size()));
        for (std::size_t e : ck.shapes[i]) le::write_u64(os, e);
        for (double x : ck.params[i]) le::write_f64(os, x);
    }
    write_table(os, ck.ema);
    le::write_u64(os, ck.adam_t);
    write_table(os, ck.adam_m);
    write_table(os, ck.adam_v);
    le::write_u64(os, ck.seed);
    le::write_u64(os, ck.step);
    le::write_f64(os, ck.wall_s);
    return os.str();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    std::istringstream is(bytes, std::ios::binary);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kMagic, 4)) throw FormatError("not a checkpoint (bad magic bytes)");
    const std::uint32_t version = le::read_u32(is);
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    ck.config = RunConfig::parse(le::read_string(is), RunConfig{});
    const std::uint32_t channels = le::read_u32(is);
    if (channels > 4096) throw FormatError("checkpoint stats block is corrupt");
    for (std::uint32_t c = 0; c < channels; ++c) {
        ck.stats.mean.push_back(le::read_f64(is));
        ck.stats.stddev.push_back(le::read_f64(is));
    }
    const std::uint32_t n = le::read_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        ck.names.push_back(le::read_string(is));
        const std::uint32_t rank = le::read_u32(is);
        if (rank == 0 || rank > 8) throw FormatError("checkpoint entry " + ck.names.back() + " has rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& e : shape) e = le::read_u64(is);
        std::vector<double> row(numel(shape));
        for (double& x : row) x = le::read_f64(is);
        ck.shapes.push_back(std::move(shape));
        ck.params.push_back(std::move(row));
    }
    ck.ema = read_table(is);
    ck.adam_t = le::read_u64(is);
    ck.adam_m = read_table(is);
    ck.adam_v = read_table(is);
    ck.seed = le::read_u64(is);
    ck.step = le::read_u64(is);
    ck.wall_s = le::read_f64(is);
    check_table(ck.ema, ck, "EMA");
    check_table(ck.adam_m, ck, "first-moment");
    check_table(ck.adam_v, ck, "second-moment");
    if (ck.stats.channels() != ck.config.model.channels) throw FormatError("checkpoint stats do not match the configured channel count");
    return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string bytes = encode_checkpoint(ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw FormatError("cannot open " + tmp + " for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw FormatError("write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move checkpoint into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return decode_checkpoint(buf.str());
}

std::unique_ptr<HiMarModel> model_from_checkpoint(const Checkpoint& ck, bool use_ema) {
    auto model = std::make_unique<HiMarModel>(ck.config.model, 0);
    const auto params = model->store.params();
    if (params.size() != ck.names.size()) {
        throw FormatError("checkpoint holds " + std::to_string(ck.names.size()) + " parameters but its config implies " +
                          std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != ck.names[i]) throw FormatError("checkpoint parameter " + std::to_string(i) + " is " + ck.names[i] + ", expected " + params[i].name);
        if (params[i].tensor.shape() != ck.shapes[i]) {
            throw FormatError("checkpoint parameter " + ck.names[i] + " has shape " + shape_str(ck.shapes[i]) + ", config implies " +
                              shape_str(params[i].tensor.shape()));
        }
    }
    model->store.load(use_ema ? ck.ema : ck.params);
    return model;
}

void restore_trainer(Trainer& trainer, const Checkpoint& ck) {
    if (trainer.opt.m.size() != ck.adam_m.size()) throw FormatError("checkpoint optimizer state does not match the model");
    trainer.opt.t = ck.adam_t;
    trainer.opt.m = ck.adam_m;
    trainer.opt.v = ck.adam_v;
    trainer.ema.shadow = ck.ema;
    trainer.steps_done = ck.step;
    trainer.wall_s = ck.wall_s;
    if (trainer.cfg.seed != ck.seed) throw ConfigError("resume seed " + std::to_string(trainer.cfg.seed) + " differs from the checkpoint seed " + std::to_string(ck.seed));
}

}  // namespace himar
