// Versioned JSON checkpoint: shapes and flattened values of every network and
// prior parameter, the optimizer moments and the trainer RNG state, enough to
// resume a run bit-for-bit.
#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "demvae/model.hpp"

namespace demvae {

inline constexpr const char* kCheckpointFormat = "demvae-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Checkpoint missing, of another format, or of an unsupported version.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()},
          {"values", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  if (j.at("rows").get<Eigen::Index>() != rows || j.at("cols").get<Eigen::Index>() != cols) {
    throw CheckpointError("checkpoint shape does not match model dimensions");
  }
  const auto values = j.at("values").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(values.size()) != rows * cols) throw CheckpointError("checkpoint value count mismatch");
  return Eigen::Map<const Matrix>(values.data(), rows, cols);
}

inline nlohmann::json net_to_json(const DenseNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    layers.push_back({{"weight", matrix_to_json(layer.weight)},
                      {"bias", matrix_to_json(layer.bias)},
                      {"activation", layer.activation == Activation::kTanh ? "tanh" : "identity"}});
  }
  return layers;
}

inline void net_from_json(DenseNet& net, const nlohmann::json& j) {
  if (j.size() != net.num_layers()) throw CheckpointError("checkpoint layer count mismatch");
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto& layer = net.layer(l);
    const auto& jl = j.at(l);
    layer.weight = matrix_from_json(jl.at("weight"), layer.weight.rows(), layer.weight.cols());
    layer.bias = matrix_from_json(jl.at("bias"), layer.bias.size(), 1);
    const auto act = jl.at("activation").get<std::string>();
    layer.activation = act == "tanh" ? Activation::kTanh : Activation::kIdentity;
  }
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const DemVaeModel& model, const TrainState& state) {
  nlohmann::json prior_mean = nlohmann::json::array(), prior_log_var = nlohmann::json::array();
  for (std::size_t b = 0; b < model.prior.mean.size(); ++b) {
    prior_mean.push_back(detail::matrix_to_json(model.prior.mean[b]));
    prior_log_var.push_back(detail::matrix_to_json(model.prior.log_var[b]));
  }
  std::ostringstream rng;
  rng << state.rng;
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"dims", model.dims()},
          {"obs_family", std::string(to_string(model.obs_family()))},
          {"objective", model.objective()},
          {"encoder", detail::net_to_json(model.encoder)},
          {"decoder", detail::net_to_json(model.decoder)},
          {"prior", {{"mean", prior_mean}, {"log_var", prior_log_var}}},
          {"adam",
           {{"lr", state.adam.lr},
            {"beta1", state.adam.beta1},
            {"beta2", state.adam.beta2},
            {"eps", state.adam.eps},
            {"step", state.adam.step},
            {"m", state.adam.m},
            {"v", state.adam.v}}},
          {"rng", rng.str()},
          {"step", state.step}};
}

struct Checkpoint {
  DemVaeModel model;
  TrainState state;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw CheckpointError("not a demvae checkpoint");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    const auto dims = j.at("dims").get<ModelDims>();
    Checkpoint ck{DemVaeModel(dims, parse_obs_family(j.at("obs_family").get<std::string>()),
                              j.at("objective").get<ObjectiveConfig>(), 0),
                  TrainState{}};
    detail::net_from_json(ck.model.encoder, j.at("encoder"));
    detail::net_from_json(ck.model.decoder, j.at("decoder"));
    const auto& pm = j.at("prior").at("mean");
    const auto& pl = j.at("prior").at("log_var");
    if (pm.size() != ck.model.prior.mean.size() || pl.size() != ck.model.prior.log_var.size()) {
      throw CheckpointError("checkpoint prior block count mismatch");
    }
    for (std::size_t b = 0; b < pm.size(); ++b) {
      auto& m = ck.model.prior.mean[b];
      m = detail::matrix_from_json(pm.at(b), m.rows(), m.cols());
      auto& s = ck.model.prior.log_var[b];
      s = detail::matrix_from_json(pl.at(b), s.rows(), s.cols());
    }
    const auto& a = j.at("adam");
    ck.state.adam.lr = a.at("lr").get<double>();
    ck.state.adam.beta1 = a.at("beta1").get<double>();
    ck.state.adam.beta2 = a.at("beta2").get<double>();
    ck.state.adam.eps = a.at("eps").get<double>();
    ck.state.adam.step = a.at("step").get<std::uint64_t>();
    ck.state.adam.m = a.at("m").get<std::vector<double>>();
    ck.state.adam.v = a.at("v").get<std::vector<double>>();
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> ck.state.rng;
    if (!rng) throw CheckpointError("checkpoint RNG state is malformed");
    ck.state.step = j.at("step").get<std::uint64_t>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const DemVaeModel& model, const TrainState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << checkpoint_to_json(model, state).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace demvae
