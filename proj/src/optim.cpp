#include "vistok/optim.hpp"

#include <cmath>
#include <numbers>

namespace vistok {

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ContractError("learning rate must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
        throw ContractError("Adam betas must lie in (0,1)");
    }
    if (epochs < 0 || batch_size <= 0) throw ContractError("epochs >= 0 and batch_size > 0 required");
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    switch (cfg.schedule.kind) {
        case ScheduleKind::constant:
            return cfg.lr;
        case ScheduleKind::exponential:
            return cfg.lr * std::pow(cfg.schedule.decay, epoch);
        case ScheduleKind::cosine: {
            const double total = std::max(cfg.epochs, 1);
            return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total));
        }
        case ScheduleKind::step: {
            double lr = cfg.lr;
            for (int m : cfg.schedule.milestones)
                if (epoch >= m) lr *= cfg.schedule.gamma;
            return lr;
        }
    }
    return cfg.lr;
}

template <class T>
std::vector<Parameter<T>> make_parameters(const ParamList<T>& params) {
    std::vector<Parameter<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        out.push_back({p.name, p.var, Tensor<T>::zeros(p.var.shape()),
                       Tensor<T>::zeros(p.var.shape()), 0});
    }
    return out;
}

template <class T>
void adam_step(std::span<Parameter<T>> params, double lr_t, const TrainConfig& cfg) {
    for (auto& p : params) {
        if (!p.var.has_grad()) {
            throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");
        }
        if (p.m.shape() != p.var.shape() || p.v.shape() != p.var.shape()) {
            throw ShapeError("adam_step: moment shape mismatch for '" + p.name + "'");
        }
    }
    for (auto& p : params) {
        ++p.step;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
        auto& w = p.var.mutable_value();
        const auto& g = p.var.grad();
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double gi = g[i];
            const double m = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
            const double v = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
            p.m[i] = static_cast<T>(m);
            p.v[i] = static_cast<T>(v);
            double wi = w[i];
            wi -= lr_t * cfg.weight_decay * wi;
            wi -= lr_t * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
            w[i] = static_cast<T>(wi);
        }
    }
}

namespace {
const char* schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::exponential: return "exponential";
        case ScheduleKind::cosine: return "cosine";
        case ScheduleKind::step: return "step";
    }
    return "constant";
}
}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr", c.lr},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"eps", c.eps},
                       {"weight_decay", c.weight_decay},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed},
                       {"schedule",
                        {{"kind", schedule_name(c.schedule.kind)},
                         {"decay", c.schedule.decay},
                         {"milestones", c.schedule.milestones},
                         {"gamma", c.schedule.gamma}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        const std::string kind = s.value("kind", std::string("constant"));
        if (kind == "constant") c.schedule.kind = ScheduleKind::constant;
        else if (kind == "exponential") c.schedule.kind = ScheduleKind::exponential;
        else if (kind == "cosine") c.schedule.kind = ScheduleKind::cosine;
        else if (kind == "step") c.schedule.kind = ScheduleKind::step;
        else throw ContractError("unknown schedule kind '" + kind + "'");
        c.schedule.decay = s.value("decay", c.schedule.decay);
        c.schedule.milestones = s.value("milestones", c.schedule.milestones);
        c.schedule.gamma = s.value("gamma", c.schedule.gamma);
    }
}

template std::vector<Parameter<float>> make_parameters(const ParamList<float>&);
template std::vector<Parameter<double>> make_parameters(const ParamList<double>&);
template void adam_step(std::span<Parameter<float>>, double, const TrainConfig&);
template void adam_step(std::span<Parameter<double>>, double, const TrainConfig&);

}  // namespace vistok
