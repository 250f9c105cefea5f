/*
 * Copyright 2026 The mixsup Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"
#include "mixsup/numcore/random.hpp"

namespace mixsup::training {

struct StratumInput {
    std::string exam_id;
    std::optional<int> max_grade;
};

struct Stratum {
    CohortStratum label = CohortStratum::Isup0;
    std::vector<std::size_t> members; // indices into the stratified list
};

struct Strata {
    std::array<Stratum, 4> strata;
    std::vector<std::string> warnings;

    std::size_t nonempty() const
    {
        return static_cast<std::size_t>(
            std::count_if(strata.begin(), strata.end(), [](const Stratum& s) { return !s.members.empty(); }));
    }
};

/// Buckets exams by their max region grade: 0, 1, 2, 3-5.
inline Strata stratify(const std::vector<StratumInput>& items)
{
    Strata out;
    for (std::size_t s = 0; s < 4; ++s) out.strata[s].label = static_cast<CohortStratum>(s);
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (!items[i].max_grade) throw DataError("exam '" + items[i].exam_id + "' has no graded region; cannot stratify");
        out.strata[static_cast<std::size_t>(stratum_for_grade(*items[i].max_grade))].members.push_back(i);
    }
    for (const auto& s : out.strata) {
        if (s.members.empty()) out.warnings.push_back(std::string("stratum ") + to_string(s.label) + " is empty");
    }
    return out;
}

inline Strata stratify(const std::vector<const Exam*>& exams)
{
    std::vector<StratumInput> items;
    for (const auto* e : exams) items.push_back({e->meta.exam_id, e->max_grade()});
    return stratify(items);
}

/// Round-robin over the nonempty strata in fixed order, each stratum
/// reshuffled at the start of every epoch and reshuffled again whenever a
/// short stratum runs out. One epoch draws (nonempty strata) x (largest
/// stratum) exams, rounded up to whole batches.
class BalancedBatchSampler {
public:
    BalancedBatchSampler(const Strata& strata, std::size_t batch_size, std::uint64_t seed)
        : batch_size_(batch_size), rng_(seed)
    {
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        for (const auto& s : strata.strata) {
            if (!s.members.empty()) pools_.push_back({s.label, s.members, {}, 0});
        }
        if (pools_.empty()) throw DataError("balanced batching needs at least one nonempty stratum");
        for (const auto& p : pools_) longest_ = std::max(longest_, p.members.size());
    }

    std::size_t draws_per_epoch() const
    {
        const std::size_t raw = pools_.size() * longest_;
        return (raw + batch_size_ - 1) / batch_size_ * batch_size_;
    }
    std::size_t batches_per_epoch() const { return draws_per_epoch() / batch_size_; }

    /// Batches of member indices for the next epoch.
    std::vector<std::vector<std::size_t>> next_epoch()
    {
        for (auto& p : pools_) refill(p);
        std::vector<std::vector<std::size_t>> batches(batches_per_epoch());
        std::size_t turn = 0;
        for (auto& b : batches) {
            for (std::size_t i = 0; i < batch_size_; ++i, ++turn) {
                auto& p = pools_[turn % pools_.size()];
                if (p.next == p.order.size()) refill(p);
                b.push_back(p.order[p.next++]);
            }
        }
        return batches;
    }

    /// Stratum label of a member index.
    CohortStratum label_of(std::size_t member) const
    {
        for (const auto& p : pools_) {
            if (std::find(p.members.begin(), p.members.end(), member) != p.members.end()) return p.label;
        }
        throw Error("index is not a stratum member");
    }

private:
    struct Pool {
        CohortStratum label;
        std::vector<std::size_t> members;
        std::vector<std::size_t> order;
        std::size_t next;
    };

    void refill(Pool& p)
    {
        p.order = p.members;
        rng_.shuffle(p.order.begin(), p.order.end());
        p.next = 0;
    }

    std::size_t batch_size_;
    num::Rng rng_;
    std::vector<Pool> pools_;
    std::size_t longest_ = 0;
};

} // namespace mixsup::training
