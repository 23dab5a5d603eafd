#include "lmc/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace lmc {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'L', 'M', 'C', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw ParseError("checkpoint truncated");
    return v;
}

uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw ParseError("checkpoint truncated");
    return v;
}

std::string read_blob(std::istream& in) {
    uint64_t len = read_u64(in);
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    if (!in) throw ParseError("checkpoint truncated");
    return s;
}

json example_to_json(const Example& ex) {
    json j;
    j["id"] = ex.id;
    j["task"] = ex.task;
    j["split"] = split_name(ex.split);
    j["tokens"] = ex.tokens;
    j["patches"] = ex.patches;
    j["relation"] = ex.relation;
    j["spans"] = {ex.head_start, ex.head_end, ex.tail_start, ex.tail_end};
    j["tags"] = ex.tags;
    return j;
}

Example example_from_json(const json& j) {
    Example ex;
    ex.id = j.at("id").get<uint64_t>();
    ex.task = j.at("task").get<int>();
    std::string sp = j.at("split").get<std::string>();
    ex.split = sp == "train" ? Split::Train : sp == "val" ? Split::Val : Split::Test;
    ex.tokens = j.at("tokens").get<std::vector<int>>();
    ex.patches = j.at("patches").get<std::vector<std::vector<double>>>();
    ex.relation = j.at("relation").get<int>();
    auto spans = j.at("spans").get<std::vector<int>>();
    if (spans.size() != 4) throw ParseError("checkpoint: malformed spans");
    ex.head_start = spans[0];
    ex.head_end = spans[1];
    ex.tail_start = spans[2];
    ex.tail_end = spans[3];
    ex.tags = j.at("tags").get<std::vector<int>>();
    return ex;
}

json state_to_json(const TrainerCheckpoint& c) {
    json j;
    json bank;
    bank["budget_per_class"] = c.bank.budget_per_class;
    bank["rng_seed"] = c.bank.rng_seed;
    bank["global_limit"] = c.bank.global_limit;
    bank["update_counter"] = c.bank.update_counter;
    json entries = json::object(), seen = json::object();
    for (const auto& [cls, v] : c.bank.entries) {
        json list = json::array();
        for (const Example& ex : v) list.push_back(example_to_json(ex));
        entries[std::to_string(cls)] = std::move(list);
    }
    for (const auto& [cls, n] : c.bank.seen_count) seen[std::to_string(cls)] = n;
    bank["entries"] = std::move(entries);
    bank["seen_count"] = std::move(seen);
    j["bank"] = std::move(bank);

    json mod;
    mod["alpha"] = c.modulation.alpha;
    mod["mode"] = modulation_mode_name(c.modulation.mode);
    mod["g_history"] = c.modulation.g_history;
    if (c.modulation.G_prev) mod["G_prev"] = *c.modulation.G_prev;
    j["modulation"] = std::move(mod);

    json scores = json::array();
    for (const auto& cell : c.scores) scores.push_back({cell.k, cell.i, cell.v});
    j["scores"] = std::move(scores);
    j["forgetting"] = c.A;

    json trace = json::array();
    for (const TraceRow& r : c.trace)
        trace.push_back({r.task, r.phase, r.epoch, r.batch, r.gamma, r.g});
    j["trace"] = std::move(trace);
    return j;
}

void state_from_json(const json& j, TrainerCheckpoint& c) {
    const json& bank = j.at("bank");
    c.bank.budget_per_class = bank.at("budget_per_class").get<size_t>();
    c.bank.rng_seed = bank.at("rng_seed").get<uint64_t>();
    c.bank.global_limit = bank.at("global_limit").get<size_t>();
    c.bank.update_counter = bank.at("update_counter").get<uint64_t>();
    for (const auto& [key, list] : bank.at("entries").items()) {
        auto& slot = c.bank.entries[std::stoi(key)];
        for (const json& e : list) slot.push_back(example_from_json(e));
    }
    for (const auto& [key, n] : bank.at("seen_count").items())
        c.bank.seen_count[std::stoi(key)] = n.get<uint64_t>();

    const json& mod = j.at("modulation");
    c.modulation.alpha = mod.at("alpha").get<double>();
    std::string mode = mod.at("mode").get<std::string>();
    c.modulation.mode =
        mode == "visual_only" ? ModulationMode::VisualOnly : ModulationMode::Symmetric;
    c.modulation.g_history = mod.at("g_history").get<std::vector<double>>();
    if (mod.contains("G_prev")) c.modulation.G_prev = mod.at("G_prev").get<double>();

    for (const json& cell : j.at("scores"))
        c.scores.push_back({cell.at(0).get<int>(), cell.at(1).get<int>(), cell.at(2).get<double>()});
    c.A = j.at("forgetting").get<std::vector<double>>();
    for (const json& r : j.at("trace"))
        c.trace.push_back({r.at(0).get<int>(), r.at(1).get<std::string>(), r.at(2).get<int>(),
                           r.at(3).get<int>(), r.at(4).get<double>(), r.at(5).get<double>()});
}

}  // namespace

TrainerCheckpoint snapshot_model(const DualStreamModel& model) {
    TrainerCheckpoint c;
    c.enc = model.config();
    c.kind = model.head_kind();
    c.model_seed = model.seed();
    c.class_ids = model.class_ids();
    for (const Parameter* p : model.parameters()) c.params.push_back(p->value);
    return c;
}

DualStreamModel restore_model(const TrainerCheckpoint& ckpt) {
    DualStreamModel model(ckpt.enc, ckpt.kind, ckpt.model_seed);
    model.expand_head(ckpt.class_ids);
    auto params = model.parameters();
    if (params.size() != ckpt.params.size())
        throw ValidationError("checkpoint: parameter count mismatch, expected " +
                              std::to_string(params.size()) + " got " +
                              std::to_string(ckpt.params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        if (!same_shape(params[i]->value, ckpt.params[i]))
            throw ValidationError("checkpoint: shape mismatch at parameter " + params[i]->name);
        params[i]->value = ckpt.params[i];
    }
    return model;
}

void save_checkpoint(const std::string& path, const TrainerCheckpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open " + path + " for writing");
    out.write(kMagic, 8);
    write_u32(out, kVersion);

    json meta;
    meta["layers"] = ckpt.enc.layers;
    meta["heads"] = ckpt.enc.heads;
    meta["width"] = ckpt.enc.width;
    meta["seq_len"] = ckpt.enc.seq_len;
    meta["interact_layers"] = ckpt.enc.interact_layers;
    meta["vocab_size"] = ckpt.enc.vocab_size;
    meta["patch_dim"] = ckpt.enc.patch_dim;
    meta["freeze_shared_keys_after_task1"] = ckpt.enc.freeze_shared_keys_after_task1;
    meta["kind"] = task_kind_name(ckpt.kind);
    meta["model_seed"] = ckpt.model_seed;
    meta["config_hash"] = ckpt.config_hash;
    meta["completed_task"] = ckpt.completed_task;
    meta["class_ids"] = ckpt.class_ids;
    std::string meta_str = meta.dump();
    write_u64(out, meta_str.size());
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    write_u64(out, ckpt.params.size());
    for (const Tensor& t : ckpt.params) {
        write_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) write_u32(out, static_cast<uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }

    std::string state_str = state_to_json(ckpt).dump();
    write_u64(out, state_str.size());
    out.write(state_str.data(), static_cast<std::streamsize>(state_str.size()));
    if (!out) throw InputError("write failed for " + path);
}

TrainerCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw ParseError("checkpoint: bad format id in " + path);
    uint32_t version = read_u32(in);
    if (version != kVersion)
        throw ParseError("checkpoint: unsupported version " + std::to_string(version));

    TrainerCheckpoint c;
    json meta;
    try {
        meta = json::parse(read_blob(in));
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: bad header: ") + e.what());
    }
    try {
        c.enc.layers = meta.at("layers").get<int>();
        c.enc.heads = meta.at("heads").get<int>();
        c.enc.width = meta.at("width").get<int>();
        c.enc.seq_len = meta.at("seq_len").get<int>();
        c.enc.interact_layers = meta.at("interact_layers").get<int>();
        c.enc.vocab_size = meta.at("vocab_size").get<int>();
        c.enc.patch_dim = meta.at("patch_dim").get<int>();
        c.enc.freeze_shared_keys_after_task1 =
            meta.at("freeze_shared_keys_after_task1").get<bool>();
        c.kind = meta.at("kind").get<std::string>() == "mner" ? TaskKind::Mner : TaskKind::Mre;
        c.model_seed = meta.at("model_seed").get<uint64_t>();
        c.config_hash = meta.at("config_hash").get<uint64_t>();
        c.completed_task = meta.at("completed_task").get<int>();
        c.class_ids = meta.at("class_ids").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: bad header: ") + e.what());
    }

    uint64_t n_params = read_u64(in);
    c.params.reserve(n_params);
    for (uint64_t i = 0; i < n_params; ++i) {
        uint32_t ndim = read_u32(in);
        if (ndim > 4) throw ParseError("checkpoint: implausible tensor rank");
        std::vector<int> shape(ndim);
        long long numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(read_u32(in));
            numel *= shape[d];
        }
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!in) throw ParseError("checkpoint truncated in tensor data");
        c.params.push_back(std::move(t));
    }

    try {
        state_from_json(json::parse(read_blob(in)), c);
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: bad state section: ") + e.what());
    }
    return c;
}

}  // namespace lmc
