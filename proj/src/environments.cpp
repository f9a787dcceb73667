#include "dpo/environments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dpo/errors.hpp"

namespace dpo {

Adjacency EnvObservation::adjacency() const {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n_atomic; ++i) {
    for (std::size_t j = i + 1; j < n_atomic; ++j) {
      if (link(i, j) != 0.0) edges.emplace_back(i, j);
    }
  }
  return Adjacency(n_atomic, edges);
}

void to_json(nlohmann::json& j, const EnvObservation& obs) {
  j = {{"n_atomic", obs.n_atomic},
       {"local_width", obs.local_width},
       {"rows", obs.rows},
       {"global_step", obs.global_step}};
}

void from_json(const nlohmann::json& j, EnvObservation& obs) {
  obs.n_atomic = j.at("n_atomic").get<std::size_t>();
  obs.local_width = j.at("local_width").get<std::size_t>();
  obs.rows = j.at("rows").get<std::vector<double>>();
  obs.global_step = j.at("global_step").get<std::int64_t>();
  if (obs.rows.size() != obs.n_atomic * obs.row_width()) throw InvalidInput("observation rows have the wrong size");
}

EnvObservation make_observation(const Adjacency& adjacency, const std::vector<std::vector<double>>& local,
                                std::int64_t global_step) {
  EnvObservation obs;
  obs.n_atomic = local.size();
  obs.local_width = local.empty() ? 0 : local[0].size();
  obs.global_step = global_step;
  obs.rows.assign(obs.n_atomic * obs.row_width(), 0.0);
  for (auto [a, b] : adjacency.edges()) {
    obs.rows[a * obs.row_width() + b] = 1.0;
    obs.rows[b * obs.row_width() + a] = 1.0;
  }
  for (std::size_t i = 0; i < obs.n_atomic; ++i) {
    if (local[i].size() != obs.local_width) throw InvalidInput("ragged local features");
    for (std::size_t f = 0; f < obs.local_width; ++f) obs.rows[i * obs.row_width() + obs.n_atomic + f] = local[i][f];
  }
  return obs;
}

Tensor node_inputs(const EnvObservation& obs) {
  Tensor x(obs.n_atomic, 1 + obs.local_width);
  for (std::size_t i = 0; i < obs.n_atomic; ++i) {
    double degree = 0.0;
    for (std::size_t j = 0; j < obs.n_atomic; ++j) degree += obs.link(i, j);
    x(i, 0) = degree;
    for (std::size_t f = 0; f < obs.local_width; ++f) x(i, 1 + f) = obs.local(i, f);
  }
  return x;
}

namespace {

void check_action(const StructuredAction& action, std::size_t n, std::size_t arity) {
  if (action.size() != n) {
    throw InvalidInput("action has " + std::to_string(action.size()) + " entries, expected " + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (action[i] >= arity) throw InvalidInput("action entry " + std::to_string(i) + " out of range");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// GridSignals

GridSignals::GridSignals(GridSignalsOptions options) : options_(options) {
  if (options_.n_signals < 2 || options_.n_signals > 8) throw InvalidInput("GridSignals needs 2..8 signals");
  if (options_.horizon < 1) throw InvalidInput("horizon must be positive");
  std::vector<Edge> edges;
  for (std::size_t i = 0; i + 1 < options_.n_signals; ++i) edges.emplace_back(i, i + 1);
  adjacency_ = Adjacency(options_.n_signals, edges);
  queues_.assign(options_.n_signals, {0, 0});
  last_phase_.assign(options_.n_signals, 0);
}

EnvObservation GridSignals::reset(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = options_.n_signals;
  queues_.assign(n, {0, 0});
  last_phase_.assign(n, 0);
  injected_ = 0;
  exited_ = 0;
  t_ = 0;
  for (auto& q : queues_) {
    for (auto& v : q) {
      v = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(options_.initial_max_queue + 1)));
      injected_ += v;
    }
  }
  arrivals_.assign(options_.horizon, std::vector<std::array<std::int64_t, 2>>(n, {0, 0}));
  for (auto& step : arrivals_) {
    for (auto& q : step) {
      for (auto& v : q) v = rng.uniform() < options_.arrival_prob ? 1 : 0;
    }
  }
  return observe();
}

StepResult GridSignals::step(const StructuredAction& action) {
  if (done()) throw IllegalQuery("GridSignals episode already finished");
  check_action(action, options_.n_signals, kPhases);
  const std::size_t n = options_.n_signals;
  std::vector<std::int64_t> transfer(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t phase = action[i];
    const std::int64_t served = std::min(queues_[i][phase], options_.service_capacity);
    queues_[i][phase] -= served;
    last_phase_[i] = phase;
    if (phase == 0 && i + 1 < n) {
      transfer[i + 1] += served;
    } else {
      exited_ += served;
    }
  }
  double reward = 0.0;
  for (const auto& q : queues_) reward -= static_cast<double>(q[0] + q[1]);
  for (std::size_t i = 0; i < n; ++i) queues_[i][0] += transfer[i];
  if (!arrivals_.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < 2; ++k) {
        queues_[i][k] += arrivals_[t_][i][k];
        injected_ += arrivals_[t_][i][k];
      }
    }
  }
  ++t_;
  return {observe(), reward, done()};
}

EnvObservation GridSignals::observe() const {
  std::vector<std::vector<double>> local(options_.n_signals);
  for (std::size_t i = 0; i < options_.n_signals; ++i) {
    local[i] = {static_cast<double>(queues_[i][0]), static_cast<double>(queues_[i][1]),
                static_cast<double>(last_phase_[i])};
  }
  return make_observation(adjacency_, local, static_cast<std::int64_t>(t_));
}

ActionSpaceSpec GridSignals::action_space() const {
  return ActionSpaceSpec{options_.n_signals, kPhases, adjacency_, false};
}

std::int64_t GridSignals::in_queue() const {
  std::int64_t s = 0;
  for (const auto& q : queues_) s += q[0] + q[1];
  return s;
}

void GridSignals::set_queues(const std::vector<std::array<std::int64_t, 2>>& queues) {
  if (queues.size() != options_.n_signals) throw InvalidInput("queue vector has the wrong length");
  injected_ += [&] {
    std::int64_t delta = 0;
    for (std::size_t i = 0; i < queues.size(); ++i) {
      delta += queues[i][0] + queues[i][1] - queues_[i][0] - queues_[i][1];
    }
    return delta;
  }();
  queues_ = queues;
}

nlohmann::json GridSignals::save_state() const {
  nlohmann::json arrivals = nlohmann::json::array();
  for (const auto& step : arrivals_) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& q : step) row.push_back({q[0], q[1]});
    arrivals.push_back(row);
  }
  nlohmann::json queues = nlohmann::json::array();
  for (const auto& q : queues_) queues.push_back({q[0], q[1]});
  return {{"kind", "gridsignals"}, {"queues", queues},     {"last_phase", last_phase_}, {"arrivals", arrivals},
          {"t", t_},               {"injected", injected_}, {"exited", exited_}};
}

void GridSignals::load_state(const nlohmann::json& state) {
  try {
    queues_.clear();
    for (const auto& q : state.at("queues")) queues_.push_back({q[0].get<std::int64_t>(), q[1].get<std::int64_t>()});
    last_phase_ = state.at("last_phase").get<std::vector<std::size_t>>();
    arrivals_.clear();
    for (const auto& step : state.at("arrivals")) {
      std::vector<std::array<std::int64_t, 2>> row;
      for (const auto& q : step) row.push_back({q[0].get<std::int64_t>(), q[1].get<std::int64_t>()});
      arrivals_.push_back(row);
    }
    t_ = state.at("t").get<std::size_t>();
    injected_ = state.at("injected").get<std::int64_t>();
    exited_ = state.at("exited").get<std::int64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("corrupt GridSignals state: ") + ex.what());
  }
  if (queues_.size() != options_.n_signals) throw CheckpointError("GridSignals state has the wrong signal count");
}

// ---------------------------------------------------------------------------
// PreyCapture

PreyCapture::PreyCapture(PreyCaptureOptions options) : options_(std::move(options)) {
  if (options_.layout) {
    options_.n_predators = options_.layout->predators.size();
    options_.n_prey = options_.layout->prey.size();
  }
  if (options_.n_predators < 2 || options_.n_predators > 8) throw InvalidInput("PreyCapture needs 2..8 predators");
  if (options_.grid < 5) throw InvalidInput("PreyCapture grid must be at least 5");
  if (options_.n_prey < 1) throw InvalidInput("PreyCapture needs at least one prey");
  if (options_.horizon < 1) throw InvalidInput("horizon must be positive");
  const auto cells = static_cast<std::size_t>(options_.grid * options_.grid);
  if (options_.n_predators + options_.n_prey > cells) throw InvalidInput("more entities than grid cells");
  if (options_.layout) {
    std::vector<Cell> all = options_.layout->predators;
    all.insert(all.end(), options_.layout->prey.begin(), options_.layout->prey.end());
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (all[i].x < 0 || all[i].y < 0 || all[i].x >= options_.grid || all[i].y >= options_.grid) {
        throw InvalidInput("layout cell outside the grid");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (all[i] == all[j]) throw InvalidInput("layout entities must occupy distinct cells");
      }
    }
  }
}

Cell PreyCapture::wrap(Cell c) const {
  const std::int64_t g = options_.grid;
  return {((c.x % g) + g) % g, ((c.y % g) + g) % g};
}

void PreyCapture::rebuild_adjacency() {
  std::vector<std::vector<double>> positions;
  for (const auto& p : predators_) positions.push_back({static_cast<double>(p.x), static_cast<double>(p.y)});
  const std::size_t k = std::min<std::size_t>(4, predators_.size() - 1);
  adjacency_ = adjacency_from_geometry(positions, KNearestRule{k});
}

EnvObservation PreyCapture::reset(std::uint64_t seed) {
  t_ = 0;
  if (options_.layout) {
    predators_ = options_.layout->predators;
    prey_ = options_.layout->prey;
  } else {
    Rng rng(seed);
    const auto g = static_cast<std::uint64_t>(options_.grid);
    std::vector<std::uint64_t> taken;
    auto draw = [&] {
      for (;;) {
        const std::uint64_t cell = rng.below(g * g);
        if (std::find(taken.begin(), taken.end(), cell) == taken.end()) {
          taken.push_back(cell);
          return Cell{static_cast<std::int64_t>(cell % g), static_cast<std::int64_t>(cell / g)};
        }
      }
    };
    predators_.clear();
    prey_.clear();
    for (std::size_t i = 0; i < options_.n_predators; ++i) predators_.push_back(draw());
    for (std::size_t i = 0; i < options_.n_prey; ++i) prey_.push_back(draw());
  }
  alive_.assign(prey_.size(), true);
  rebuild_adjacency();
  return observe();
}

bool PreyCapture::done() const {
  return t_ >= options_.horizon || std::none_of(alive_.begin(), alive_.end(), [](bool a) { return a; });
}

StepResult PreyCapture::step(const StructuredAction& action) {
  if (done()) throw IllegalQuery("PreyCapture episode already finished");
  check_action(action, predators_.size(), kMoves);
  for (std::size_t i = 0; i < predators_.size(); ++i) {
    Cell c = predators_[i];
    switch (action[i]) {
      case kNorth: --c.y; break;
      case kSouth: ++c.y; break;
      case kEast: ++c.x; break;
      case kWest: --c.x; break;
      default: break;
    }
    predators_[i] = wrap(c);
  }
  double reward = -kStepPenalty;
  for (std::size_t p = 0; p < prey_.size(); ++p) {
    if (!alive_[p]) continue;
    const Cell q = prey_[p];
    const Cell around[4] = {wrap({q.x, q.y - 1}), wrap({q.x, q.y + 1}), wrap({q.x + 1, q.y}), wrap({q.x - 1, q.y})};
    std::size_t adjacent = 0;
    for (const auto& pred : predators_) {
      if (std::find(std::begin(around), std::end(around), pred) != std::end(around)) ++adjacent;
    }
    if (adjacent >= 2) {
      alive_[p] = false;
      reward += 1.0;
    }
  }
  ++t_;
  return {observe(), reward, done()};
}

EnvObservation PreyCapture::observe() const {
  const std::int64_t g = options_.grid;
  auto offset = [g](std::int64_t from, std::int64_t to) {
    std::int64_t d = ((to - from) % g + g) % g;
    if (d > g / 2) d -= g;
    return d;
  };
  std::vector<std::vector<double>> local(predators_.size());
  for (std::size_t i = 0; i < predators_.size(); ++i) {
    const Cell me = predators_[i];
    double best = std::numeric_limits<double>::infinity();
    std::int64_t bdx = 0, bdy = 0;
    for (std::size_t p = 0; p < prey_.size(); ++p) {
      if (!alive_[p]) continue;
      const std::int64_t dx = offset(me.x, prey_[p].x);
      const std::int64_t dy = offset(me.y, prey_[p].y);
      const double dist = std::hypot(static_cast<double>(dx), static_cast<double>(dy));
      if (dist < best) {
        best = dist;
        bdx = dx;
        bdy = dy;
      }
    }
    local[i] = {static_cast<double>(me.x), static_cast<double>(me.y), static_cast<double>(bdx),
                static_cast<double>(bdy)};
  }
  return make_observation(adjacency_, local, static_cast<std::int64_t>(t_));
}

ActionSpaceSpec PreyCapture::action_space() const {
  return ActionSpaceSpec{predators_.empty() ? options_.n_predators : predators_.size(), kMoves, adjacency_, false};
}

namespace {

nlohmann::json cells_json(const std::vector<Cell>& cells) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : cells) out.push_back({c.x, c.y});
  return out;
}

std::vector<Cell> cells_from(const nlohmann::json& j) {
  std::vector<Cell> out;
  for (const auto& c : j) {
    if (!c.is_array() || c.size() != 2) throw InvalidInput("cells must be [x, y] pairs");
    out.push_back({c[0].get<std::int64_t>(), c[1].get<std::int64_t>()});
  }
  return out;
}

}  // namespace

nlohmann::json PreyCapture::save_state() const {
  std::vector<int> alive(alive_.begin(), alive_.end());
  return {{"kind", "preycapture"}, {"predators", cells_json(predators_)}, {"prey", cells_json(prey_)},
          {"alive", alive},        {"t", t_}, {"adjacency", adjacency_.edges()}};
}

void PreyCapture::load_state(const nlohmann::json& state) {
  try {
    predators_ = cells_from(state.at("predators"));
    prey_ = cells_from(state.at("prey"));
    const auto alive = state.at("alive").get<std::vector<int>>();
    alive_.assign(alive.begin(), alive.end());
    t_ = state.at("t").get<std::size_t>();
    if (predators_.size() != options_.n_predators) {
      throw CheckpointError("PreyCapture state has the wrong predator count");
    }
    const auto edges = state.at("adjacency").get<std::vector<Edge>>();
    adjacency_ = Adjacency(predators_.size(), edges);
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("corrupt PreyCapture state: ") + ex.what());
  } catch (const InvalidInput& ex) {
    throw CheckpointError(std::string("corrupt PreyCapture state: ") + ex.what());
  }
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const EnvConfig& cfg) {
  j = {{"kind", cfg.kind}, {"n_atomic", cfg.n_atomic}, {"seed", cfg.seed}};
  if (cfg.horizon) j["horizon"] = *cfg.horizon;
  if (cfg.kind == "gridsignals") {
    j["arrival_prob"] = cfg.arrival_prob;
  } else {
    j["grid"] = cfg.grid;
    j["n_prey"] = cfg.n_prey;
    if (cfg.layout) j["layout"] = {{"predators", cells_json(cfg.layout->predators)}, {"prey", cells_json(cfg.layout->prey)}};
  }
}

void from_json(const nlohmann::json& j, EnvConfig& cfg) {
  try {
    cfg.kind = j.value("kind", std::string("gridsignals"));
    if (cfg.kind != "gridsignals" && cfg.kind != "preycapture") {
      throw InvalidInput("unknown environment kind '" + cfg.kind + "'");
    }
    cfg.n_atomic = j.value("n_atomic", cfg.n_atomic);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("horizon")) cfg.horizon = j.at("horizon").get<std::size_t>();
    cfg.arrival_prob = j.value("arrival_prob", cfg.arrival_prob);
    cfg.grid = j.value("grid", cfg.grid);
    cfg.n_prey = j.value("n_prey", cfg.n_prey);
    if (j.contains("layout")) {
      PreyCaptureLayout layout;
      layout.predators = cells_from(j.at("layout").at("predators"));
      layout.prey = cells_from(j.at("layout").at("prey"));
      cfg.layout = layout;
      cfg.n_atomic = layout.predators.size();
      cfg.n_prey = layout.prey.size();
    }
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidInput(std::string("malformed environment config: ") + ex.what());
  }
}

std::unique_ptr<Environment> make_environment(const EnvConfig& cfg) {
  if (cfg.kind == "gridsignals") {
    GridSignalsOptions o;
    o.n_signals = cfg.n_atomic;
    o.arrival_prob = cfg.arrival_prob;
    if (cfg.horizon) o.horizon = *cfg.horizon;
    return std::make_unique<GridSignals>(o);
  }
  if (cfg.kind == "preycapture") {
    PreyCaptureOptions o;
    o.n_predators = cfg.n_atomic;
    o.grid = cfg.grid;
    o.n_prey = cfg.n_prey;
    o.layout = cfg.layout;
    if (cfg.horizon) o.horizon = *cfg.horizon;
    return std::make_unique<PreyCapture>(o);
  }
  throw InvalidInput("unknown environment kind '" + cfg.kind + "'");
}

}  // namespace dpo
