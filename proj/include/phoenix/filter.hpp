#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "phoenix/metrics.hpp"

namespace phoenix {

enum class DropPolicy { lowest_precision, fixed_threshold };

enum class ClientStatus { active, warned, disconnected };

const char* status_name(ClientStatus status);
const char* policy_name(DropPolicy policy);

struct FilterConfig {
    DropPolicy policy = DropPolicy::lowest_precision;
    double threshold = 0.7;  // fixed_threshold only
    // Disconnect on the first poor round instead of the second.
    bool immediate = false;
    std::size_t min_active_clients = 2;
    int eval_start_round = 5;
};

// Two-strike filter. A poor round warns a client; a second consecutive poor
// round disconnects it for good. A non-poor round clears the warning.
struct FilterState {
    std::vector<ClientStatus> status;
    std::vector<int> consecutive_poor;
    FilterConfig config;

    static FilterState initial(std::size_t client_count, const FilterConfig& config);
    std::size_t connected_count() const;
};

struct FilterOutcome {
    std::vector<std::size_t> poor;
    std::vector<std::size_t> warned;
    std::vector<std::size_t> disconnected;
    // Disconnects withheld to keep min_active_clients connected; these clients
    // stay warned with a count of one.
    std::vector<std::size_t> suppressed;
};

// `metrics` must cover every connected client not in `excused`. Excused
// clients (e.g. faulted this round) keep their state.
std::pair<FilterState, FilterOutcome> filter_step(const FilterState& state,
                                                  const std::map<std::size_t, PrecisionRecall>& metrics, int round,
                                                  const std::set<std::size_t>& excused = {});

}  // namespace phoenix
