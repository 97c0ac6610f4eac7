#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vistok/nn.hpp"

namespace vistok {

enum class ScheduleKind { constant, exponential, cosine, step };

struct Schedule {
    ScheduleKind kind = ScheduleKind::constant;
    double decay = 0.98;              // exponential: lr * decay^epoch
    std::vector<int> milestones;      // step: multiply by gamma at each milestone epoch
    double gamma = 0.1;
};

struct TrainConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int epochs = 20;
    int batch_size = 8;
    Schedule schedule;
    std::uint64_t seed = 0;

    void validate() const;
};

// Learning rate for a zero-based epoch index.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

template <class T>
struct Parameter {
    std::string name;
    Var<T> var;
    Tensor<T> m;
    Tensor<T> v;
    std::int64_t step = 0;
};

template <class T>
std::vector<Parameter<T>> make_parameters(const ParamList<T>& params);

// Adam with bias correction and decoupled weight decay. Throws ContractError when a
// parameter has no gradient from a preceding backward pass.
template <class T>
void adam_step(std::span<Parameter<T>> params, double lr_t, const TrainConfig& cfg);

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace vistok
