#include "phoenix/filter.hpp"

#include <algorithm>

#include "phoenix/errors.hpp"

namespace phoenix {

const char* status_name(ClientStatus status) {
    switch (status) {
        case ClientStatus::active: return "active";
        case ClientStatus::warned: return "warned";
        case ClientStatus::disconnected: return "disconnected";
    }
    return "?";
}

const char* policy_name(DropPolicy policy) {
    return policy == DropPolicy::lowest_precision ? "lowest_precision" : "fixed_threshold";
}

FilterState FilterState::initial(std::size_t client_count, const FilterConfig& config) {
    if (config.policy == DropPolicy::fixed_threshold && !(config.threshold >= 0.0 && config.threshold <= 1.0)) {
        throw ArgumentError("precision threshold must lie in [0, 1]");
    }
    return FilterState{std::vector<ClientStatus>(client_count, ClientStatus::active),
                       std::vector<int>(client_count, 0), config};
}

std::size_t FilterState::connected_count() const {
    return static_cast<std::size_t>(
        std::count_if(status.begin(), status.end(), [](ClientStatus s) { return s != ClientStatus::disconnected; }));
}

std::pair<FilterState, FilterOutcome> filter_step(const FilterState& state,
                                                  const std::map<std::size_t, PrecisionRecall>& metrics, int round,
                                                  const std::set<std::size_t>& excused) {
    if (round < state.config.eval_start_round) {
        throw ProtocolError("filter step at round " + std::to_string(round) + " precedes evaluation start round " +
                            std::to_string(state.config.eval_start_round));
    }
    std::vector<std::size_t> judged;
    for (std::size_t i = 0; i < state.status.size(); ++i) {
        if (state.status[i] == ClientStatus::disconnected || excused.contains(i)) continue;
        if (!metrics.contains(i)) throw ProtocolError("no metrics for connected client " + std::to_string(i));
        judged.push_back(i);
    }

    FilterState next = state;
    FilterOutcome out;
    if (state.config.policy == DropPolicy::lowest_precision) {
        if (!judged.empty()) {
            std::size_t worst = judged.front();
            for (std::size_t i : judged) {
                if (metrics.at(i).precision < metrics.at(worst).precision) worst = i;
            }
            out.poor.push_back(worst);
        }
    } else {
        for (std::size_t i : judged) {
            if (metrics.at(i).precision < state.config.threshold) out.poor.push_back(i);
        }
    }

    std::vector<std::size_t> to_disconnect;
    for (std::size_t i : judged) {
        if (std::find(out.poor.begin(), out.poor.end(), i) == out.poor.end()) {
            next.consecutive_poor[i] = 0;
            next.status[i] = ClientStatus::active;
            continue;
        }
        next.consecutive_poor[i] = state.config.immediate ? 2 : std::min(next.consecutive_poor[i] + 1, 2);
        if (next.consecutive_poor[i] >= 2) {
            to_disconnect.push_back(i);
        } else {
            next.status[i] = ClientStatus::warned;
            out.warned.push_back(i);
        }
    }

    std::size_t connected = next.connected_count();
    for (std::size_t i : to_disconnect) {
        if (connected > state.config.min_active_clients) {
            next.status[i] = ClientStatus::disconnected;
            out.disconnected.push_back(i);
            --connected;
        } else {
            next.status[i] = ClientStatus::warned;
            next.consecutive_poor[i] = 1;
            out.suppressed.push_back(i);
        }
    }
    return {std::move(next), std::move(out)};
}

}  // namespace phoenix
