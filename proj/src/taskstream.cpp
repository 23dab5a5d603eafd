#include "lmc/taskstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "lmc/rng.hpp"

namespace lmc {

namespace {

using nlohmann::json;

// top two vocab ids mark the head and tail entity positions
int head_marker(int vocab) { return vocab - 1; }
int tail_marker(int vocab) { return vocab - 2; }

constexpr int kIndicatorsPerClass = 3;

struct ClassSignal {
    std::vector<int> indicator_tokens;
    std::vector<double> patch_mean;
};

std::vector<double> class_mean(const SyntheticConfig& cfg, int class_id, const char* kind_tag) {
    std::vector<double> mu(cfg.patch_dim, 0.0);
    if (class_id == kNaRelation && std::string(kind_tag) == "mre") return mu;
    auto rng = make_rng(mix64(cfg.seed, "class.patch", static_cast<uint64_t>(class_id),
                              fnv1a(kind_tag)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    double norm2 = 0.0;
    for (double& x : mu) {
        x = gauss(rng);
        norm2 += x * x;
    }
    double norm = std::sqrt(norm2);
    if (norm > 0)
        for (double& x : mu) x *= cfg.snr_visual / norm;
    return mu;
}

// Disjoint indicator-token blocks carved from a seed-shuffled permutation of
// the background range, so O tokens can avoid every class's indicators.
std::vector<std::vector<int>> indicator_blocks(const SyntheticConfig& cfg, int num_classes,
                                               const char* kind_tag) {
    int background_top = cfg.vocab_size - 2;
    if (num_classes * kIndicatorsPerClass > background_top - 1)
        throw ConfigError("vocab too small for " + std::to_string(num_classes) +
                          " signalled classes");
    std::vector<int> perm(background_top);
    std::iota(perm.begin(), perm.end(), 0);
    auto rng = make_rng(mix64(cfg.seed, "class.text", fnv1a(kind_tag)));
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<int>> blocks(num_classes);
    for (int c = 0; c < num_classes; ++c)
        blocks[c].assign(perm.begin() + c * kIndicatorsPerClass,
                         perm.begin() + (c + 1) * kIndicatorsPerClass);
    return blocks;
}

int draw_token(std::mt19937_64& rng, double snr_text, const std::vector<int>* indicators,
               const std::vector<int>& background) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (indicators && !indicators->empty() && coin(rng) < snr_text)
        return (*indicators)[rng() % indicators->size()];
    return background[rng() % background.size()];
}

std::vector<std::vector<double>> draw_patches(std::mt19937_64& rng, const SyntheticConfig& cfg,
                                              const std::vector<double>& mean) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> patches(cfg.patches_per_example);
    for (auto& p : patches) {
        p.resize(cfg.patch_dim);
        for (int j = 0; j < cfg.patch_dim; ++j) p[j] = mean[j] + gauss(rng);
    }
    return patches;
}

uint64_t example_id(int task, int slot, int idx) {
    return (static_cast<uint64_t>(task) << 40) | (static_cast<uint64_t>(slot) << 24) |
           static_cast<uint64_t>(idx);
}

// 70/10/20 per class; val and test round down, train takes the remainder
Split split_of(int idx, int n, int& n_val, int& n_test) {
    n_val = n / 10;
    n_test = n / 5;
    int n_train = n - n_val - n_test;
    if (idx < n_train) return Split::Train;
    if (idx < n_train + n_val) return Split::Val;
    return Split::Test;
}

void push_example(Snapshot& snap, Example ex) {
    switch (ex.split) {
        case Split::Train: snap.train.push_back(std::move(ex)); break;
        case Split::Val: snap.val.push_back(std::move(ex)); break;
        case Split::Test: snap.test.push_back(std::move(ex)); break;
    }
}

std::vector<int> background_tokens(const SyntheticConfig& cfg,
                                   const std::set<int>& all_indicators) {
    std::vector<int> bg;
    for (int t = 0; t < cfg.vocab_size - 2; ++t)
        if (!all_indicators.count(t)) bg.push_back(t);
    if (bg.empty()) throw ConfigError("vocab exhausted by indicator tokens");
    return bg;
}

}  // namespace

void SyntheticConfig::validate(TaskKind kind) const {
    if (tasks < 1) throw ConfigError("tasks must be at least 1");
    if (classes_per_task < 1) throw ConfigError("classes_per_task must be at least 1");
    if (samples_per_class < 5) throw ConfigError("samples_per_class must be at least 5");
    if (vocab_size < 8) throw ConfigError("vocab_size must be at least 8");
    if (patch_dim < 1 || patches_per_example < 1) throw ConfigError("patch settings invalid");
    if (tokens_per_example < (kind == TaskKind::Mre ? 4 : 2))
        throw ConfigError("tokens_per_example too small for the task layout");
    if (snr_text < 0.0 || snr_text > 1.0)
        throw ConfigError("snr_text is a mixture weight and must lie in [0, 1]");
    if (snr_visual < 0.0) throw ConfigError("snr_visual must be non-negative");
    if (kind == TaskKind::Mre && tasks * classes_per_task > relation_pool)
        throw ConfigError("relation pool exhausted: need " +
                          std::to_string(tasks * classes_per_task) + " of " +
                          std::to_string(relation_pool));
}

void TaskStream::validate() const {
    std::set<int> seen;
    for (size_t i = 0; i < tasks.size(); ++i) {
        const Snapshot& s = tasks[i];
        if (s.k != static_cast<int>(i) + 1)
            throw ValidationError("task " + std::to_string(i + 1) + ": index out of order");
        for (int c : s.new_classes)
            if (!seen.insert(c).second)
                throw ValidationError("task " + std::to_string(s.k) + ": class " +
                                      std::to_string(c) + " introduced twice");
        std::set<int> roster(s.classes.begin(), s.classes.end());
        if (i > 0) {
            for (int c : tasks[i - 1].classes)
                if (!roster.count(c))
                    throw ValidationError("task " + std::to_string(s.k) + ": class " +
                                          std::to_string(c) + " dropped from the roster");
        }
        for (int c : s.new_classes)
            if (!roster.count(c))
                throw ValidationError("task " + std::to_string(s.k) + ": new class " +
                                      std::to_string(c) + " missing from the roster");
    }
}

TaskStream generate_mre_stream(const SyntheticConfig& cfg) {
    cfg.validate(TaskKind::Mre);

    // random draw from the relation pool, sequential chunks per task
    std::vector<int> pool(cfg.relation_pool);
    std::iota(pool.begin(), pool.end(), 1);  // 0 is N/A
    auto pool_rng = make_rng(mix64(cfg.seed, "mre.pool"));
    std::shuffle(pool.begin(), pool.end(), pool_rng);

    int total_classes = cfg.tasks * cfg.classes_per_task;
    auto blocks = indicator_blocks(cfg, total_classes, "mre");
    std::set<int> all_ind;
    for (const auto& b : blocks) all_ind.insert(b.begin(), b.end());
    std::vector<int> bg = background_tokens(cfg, all_ind);

    std::vector<ClassSignal> signals(total_classes);
    for (int c = 0; c < total_classes; ++c)
        signals[c] = {blocks[c], class_mean(cfg, pool[c], "mre")};
    std::vector<double> na_mean(cfg.patch_dim, 0.0);

    TaskStream stream;
    stream.kind = TaskKind::Mre;
    stream.vocab_size = cfg.vocab_size;
    stream.patch_dim = cfg.patch_dim;

    std::vector<int> roster = {kNaRelation};
    for (int k = 1; k <= cfg.tasks; ++k) {
        Snapshot snap;
        snap.k = k;
        for (int j = 0; j < cfg.classes_per_task; ++j) {
            int slot = (k - 1) * cfg.classes_per_task + j;
            snap.new_classes.push_back(pool[slot]);
            roster.push_back(pool[slot]);
        }
        snap.classes = roster;
        std::sort(snap.classes.begin(), snap.classes.end());

        // one slot per new class plus one N/A slot
        for (int j = 0; j <= cfg.classes_per_task; ++j) {
            bool is_na = j == cfg.classes_per_task;
            int slot = (k - 1) * cfg.classes_per_task + j;
            int relation = is_na ? kNaRelation : pool[slot];
            const std::vector<int>* ind = is_na ? nullptr : &signals[slot].indicator_tokens;
            const std::vector<double>& mean = is_na ? na_mean : signals[slot].patch_mean;

            for (int idx = 0; idx < cfg.samples_per_class; ++idx) {
                auto rng = make_rng(mix64(cfg.seed, "mre.ex", static_cast<uint64_t>(k),
                                          static_cast<uint64_t>(j),
                                          static_cast<uint64_t>(idx)));
                Example ex;
                ex.id = example_id(k, j, idx);
                ex.task = k;
                int nv, nt;
                ex.split = split_of(idx, cfg.samples_per_class, nv, nt);

                ex.tokens.resize(cfg.tokens_per_example);
                ex.tokens[0] = head_marker(cfg.vocab_size);
                ex.tokens[1] = draw_token(rng, cfg.snr_text, ind, bg);
                ex.tokens[2] = tail_marker(cfg.vocab_size);
                ex.tokens[3] = draw_token(rng, cfg.snr_text, ind, bg);
                for (int t = 4; t < cfg.tokens_per_example; ++t)
                    ex.tokens[t] = draw_token(rng, cfg.snr_text, ind, bg);
                ex.head_start = 1;
                ex.head_end = 1;
                ex.tail_start = 3;
                ex.tail_end = 3;
                ex.relation = relation;
                ex.patches = draw_patches(rng, cfg, mean);
                push_example(snap, std::move(ex));
            }
        }
        stream.tasks.push_back(std::move(snap));
    }
    stream.validate();
    return stream;
}

TaskStream generate_mner_stream(const SyntheticConfig& cfg) {
    cfg.validate(TaskKind::Mner);

    int total_types = cfg.tasks * cfg.classes_per_task;
    auto blocks = indicator_blocks(cfg, total_types, "mner");
    std::set<int> all_ind;
    for (const auto& b : blocks) all_ind.insert(b.begin(), b.end());
    std::vector<int> bg = background_tokens(cfg, all_ind);

    std::vector<ClassSignal> signals(total_types);
    for (int t = 0; t < total_types; ++t) signals[t] = {blocks[t], class_mean(cfg, t, "mner")};

    TaskStream stream;
    stream.kind = TaskKind::Mner;
    stream.vocab_size = cfg.vocab_size;
    stream.patch_dim = cfg.patch_dim;

    std::vector<int> roster;
    for (int k = 1; k <= cfg.tasks; ++k) {
        Snapshot snap;
        snap.k = k;
        for (int j = 0; j < cfg.classes_per_task; ++j) {
            int type = (k - 1) * cfg.classes_per_task + j;
            snap.new_classes.push_back(type);
            roster.push_back(type);
        }
        snap.classes = roster;

        for (int j = 0; j < cfg.classes_per_task; ++j) {
            int type = (k - 1) * cfg.classes_per_task + j;
            for (int idx = 0; idx < cfg.samples_per_class; ++idx) {
                auto rng = make_rng(mix64(cfg.seed, "mner.ex", static_cast<uint64_t>(k),
                                          static_cast<uint64_t>(j),
                                          static_cast<uint64_t>(idx)));
                Example ex;
                ex.id = example_id(k, j, idx);
                ex.task = k;
                int nv, nt;
                ex.split = split_of(idx, cfg.samples_per_class, nv, nt);

                int n = cfg.tokens_per_example;
                int span_len = 1 + static_cast<int>(rng() % std::min(2, n));
                int start = static_cast<int>(rng() % (n - span_len + 1));
                ex.tokens.resize(n);
                ex.tags.assign(n, 0);
                for (int t = 0; t < n; ++t) {
                    if (t >= start && t < start + span_len) {
                        // entity tokens come from the type's own indicators
                        ex.tokens[t] =
                            signals[type].indicator_tokens[rng() %
                                                           signals[type].indicator_tokens.size()];
                        ex.tags[t] = t == start ? b_tag(type) : i_tag(type);
                    } else {
                        // O positions never touch any indicator token
                        ex.tokens[t] = bg[rng() % bg.size()];
                    }
                }
                ex.patches = draw_patches(rng, cfg, signals[type].patch_mean);
                push_example(snap, std::move(ex));
            }
        }
        stream.tasks.push_back(std::move(snap));
    }
    stream.validate();
    return stream;
}

namespace {

json example_to_json(const Example& ex, TaskKind kind) {
    json j;
    j["id"] = ex.id;
    j["task"] = ex.task;
    j["split"] = split_name(ex.split);
    j["tokens"] = ex.tokens;
    j["patches"] = ex.patches;
    if (kind == TaskKind::Mre) {
        j["label"] = ex.relation;
        j["spans"] = json::array({json::array({ex.head_start, ex.head_end}),
                                  json::array({ex.tail_start, ex.tail_end})});
    } else {
        j["tags"] = ex.tags;
    }
    return j;
}

Example example_from_json(const json& j, TaskKind kind, int line) {
    auto need = [&](const char* key) -> const json& {
        if (!j.contains(key))
            throw ParseError("line " + std::to_string(line) + ": missing field '" + key + "'");
        return j.at(key);
    };
    Example ex;
    try {
        ex.id = need("id").get<uint64_t>();
        ex.task = need("task").get<int>();
        std::string sp = need("split").get<std::string>();
        if (sp == "train") ex.split = Split::Train;
        else if (sp == "val") ex.split = Split::Val;
        else if (sp == "test") ex.split = Split::Test;
        else throw ParseError("line " + std::to_string(line) + ": unknown split '" + sp + "'");
        ex.tokens = need("tokens").get<std::vector<int>>();
        ex.patches = need("patches").get<std::vector<std::vector<double>>>();
        if (kind == TaskKind::Mre) {
            ex.relation = need("label").get<int>();
            const json& spans = need("spans");
            if (!spans.is_array() || spans.size() != 2 || spans[0].size() != 2 ||
                spans[1].size() != 2)
                throw ParseError("line " + std::to_string(line) + ": malformed spans");
            ex.head_start = spans[0][0].get<int>();
            ex.head_end = spans[0][1].get<int>();
            ex.tail_start = spans[1][0].get<int>();
            ex.tail_end = spans[1][1].get<int>();
        } else {
            ex.tags = need("tags").get<std::vector<int>>();
            if (ex.tags.size() != ex.tokens.size())
                throw ParseError("line " + std::to_string(line) + ": tag/token length mismatch");
        }
    } catch (const json::exception& e) {
        throw ParseError("line " + std::to_string(line) + ": " + e.what());
    }
    return ex;
}

}  // namespace

void save_stream(const TaskStream& stream, const std::string& path) {
    stream.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open " + path + " for writing");

    json header;
    header["format"] = "lmc-stream";
    header["version"] = 1;
    header["kind"] = task_kind_name(stream.kind);
    header["vocab_size"] = stream.vocab_size;
    header["patch_dim"] = stream.patch_dim;
    header["tasks"] = static_cast<int>(stream.tasks.size());
    json rosters = json::array(), fresh = json::array();
    for (const Snapshot& s : stream.tasks) {
        rosters.push_back(s.classes);
        fresh.push_back(s.new_classes);
    }
    header["classes"] = rosters;
    header["new_classes"] = fresh;
    out << header.dump() << "\n";

    for (const Snapshot& s : stream.tasks) {
        for (const auto* split : {&s.train, &s.val, &s.test})
            for (const Example& ex : *split) out << example_to_json(ex, stream.kind).dump() << "\n";
    }
    if (!out) throw InputError("write failed for " + path);
}

TaskStream load_stream(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw ParseError("line 1: empty file");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(std::string("line 1: ") + e.what());
    }
    if (header.value("format", "") != "lmc-stream")
        throw ParseError("line 1: not a stream file");
    if (header.value("version", 0) != 1)
        throw ParseError("line 1: unsupported version " + std::to_string(header.value("version", 0)));

    TaskStream stream;
    std::string kind = header.value("kind", "");
    if (kind == "mre") stream.kind = TaskKind::Mre;
    else if (kind == "mner") stream.kind = TaskKind::Mner;
    else throw ParseError("line 1: unknown kind '" + kind + "'");
    stream.vocab_size = header.value("vocab_size", 0);
    stream.patch_dim = header.value("patch_dim", 0);

    int n_tasks = header.value("tasks", 0);
    if (n_tasks < 1) throw ParseError("line 1: task count missing");
    if (!header.contains("classes") || !header.contains("new_classes") ||
        static_cast<int>(header["classes"].size()) != n_tasks ||
        static_cast<int>(header["new_classes"].size()) != n_tasks)
        throw ParseError("line 1: class rosters missing or wrong length");

    stream.tasks.resize(n_tasks);
    for (int k = 0; k < n_tasks; ++k) {
        stream.tasks[k].k = k + 1;
        stream.tasks[k].classes = header["classes"][k].get<std::vector<int>>();
        stream.tasks[k].new_classes = header["new_classes"][k].get<std::vector<int>>();
    }

    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        Example ex = example_from_json(j, stream.kind, line_no);
        if (ex.task < 1 || ex.task > n_tasks)
            throw ParseError("line " + std::to_string(line_no) + ": task " +
                             std::to_string(ex.task) + " out of range");
        push_example(stream.tasks[ex.task - 1], std::move(ex));
    }
    stream.validate();
    return stream;
}

}  // namespace lmc
