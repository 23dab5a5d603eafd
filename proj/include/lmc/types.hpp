#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lmc {

enum class TaskKind { Mre, Mner };

inline const char* task_kind_name(TaskKind k) { return k == TaskKind::Mre ? "mre" : "mner"; }

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

// One multimodal instance: a token sequence, a patch-feature sequence, and
// either a relation label with head/tail spans (MRE) or per-token BIO tags
// (MNER). Class id 0 is the N/A relation.
struct Example {
    uint64_t id = 0;
    int task = 0;  // 1-based task index
    Split split = Split::Train;
    std::vector<int> tokens;
    std::vector<std::vector<double>> patches;
    int relation = -1;
    int head_start = -1, head_end = -1;
    int tail_start = -1, tail_end = -1;
    std::vector<int> tags;
};

constexpr int kNaRelation = 0;

// BIO tag layout over entity types listed in introduction order:
// 0 is O, type at position j owns rows 1+2j (B) and 2+2j (I).
inline int bio_tag_count(int num_types) { return 1 + 2 * num_types; }
inline int b_tag(int type_pos) { return 1 + 2 * type_pos; }
inline int i_tag(int type_pos) { return 2 + 2 * type_pos; }

}  // namespace lmc
