#include "rexa/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rexa/error.hpp"

namespace rexa {

Selection select_next(const TaskMask& mask, std::size_t task_count, std::span<const std::uint64_t> timeouts,
                      std::uint64_t now, std::span<const bool> event_ready, std::size_t ready_from) {
  int first_timeout = -1;
  int first_ready = -1;
  std::size_t ready_rank = task_count;
  for (std::size_t i = 0; i < task_count; ++i) {
    switch (mask.get(i)) {
      case MaskState::event:
        if (event_ready[i]) return {static_cast<int>(i), WakeReason::event};
        break;
      case MaskState::timeout:
        if (first_timeout < 0 && now >= timeouts[i]) first_timeout = static_cast<int>(i);
        break;
      case MaskState::ready:
        if (const std::size_t rank = (i + task_count - ready_from % task_count) % task_count; rank < ready_rank) {
          ready_rank = rank;
          first_ready = static_cast<int>(i);
        }
        break;
      case MaskState::none:
        break;
    }
  }
  if (first_timeout >= 0) return {first_timeout, WakeReason::timeout};
  if (first_ready >= 0) return {first_ready, WakeReason::ready};
  return {};
}

std::uint64_t estimate_runtime(const Profile& prof, std::uint32_t word, std::uint64_t fallback) {
  const auto it = prof.words().find(word);
  if (it == prof.words().end() || it->second.calls == 0) return fallback;
  return it->second.steps / it->second.calls;
}

std::uint64_t estimate_task_runtime(const Profile& prof, std::uint32_t task, std::uint64_t fallback) {
  const auto it = prof.tasks().find(task);
  if (it == prof.tasks().end() || it->second.steps == 0) return fallback;
  const auto points = std::max<std::uint64_t>(1, it->second.suspensions);
  return it->second.steps / points;
}

// ---------------------------------------------------------------------------
// PowerTrace

PowerTrace::PowerTrace(std::vector<std::pair<std::uint64_t, double>> points) : points_(std::move(points)) {
  std::sort(points_.begin(), points_.end());
}

PowerTrace PowerTrace::from_csv(const std::string& text) {
  std::vector<std::pair<std::uint64_t, double>> pts;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::uint64_t t;
    double p;
    if (!(ls >> t >> p)) {
      if (pts.empty()) continue;  // header line
      throw ConfigError("malformed power trace line: " + line);
    }
    pts.emplace_back(t, p);
  }
  return PowerTrace(std::move(pts));
}

double PowerTrace::at(std::uint64_t t) const {
  double p = 0;
  for (const auto& [time, power] : points_) {
    if (time > t) break;
    p = power;
  }
  return p;
}

double PowerTrace::integrate(std::uint64_t t0, std::uint64_t t1) const {
  if (t1 <= t0) return 0;
  double e = 0;
  std::uint64_t cursor = t0;
  while (cursor < t1) {
    const auto next = next_change(cursor);
    const std::uint64_t stop = next && *next < t1 ? *next : t1;
    e += at(cursor) * static_cast<double>(stop - cursor) * 1e-6;
    cursor = stop;
  }
  return e;
}

std::optional<std::uint64_t> PowerTrace::next_change(std::uint64_t t) const {
  for (const auto& [time, power] : points_)
    if (time > t) return time;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Lazy scheduling

bool lsa_before(const LsaJob& a, const LsaJob& b) {
  if (a.deadline != b.deadline) return a.deadline < b.deadline;
  if (a.priority != b.priority) return a.priority > b.priority;
  if (a.arrival != b.arrival) return a.arrival < b.arrival;
  return a.id < b.id;
}

double predicted_runtime(double E, double P_d1, double P_S) {
  if (P_S >= P_d1) return std::numeric_limits<double>::infinity();
  return E / ((P_d1 - P_S) * 1e-6);
}

namespace {

struct Lsa {
  EnergyAccount acct;
  LsaResult res;
  std::uint64_t t = 0;

  void harvest(std::uint64_t t1) {
    const double h = acct.P_S.integrate(t, t1);
    const double room = std::max(0.0, acct.C - acct.E);
    const double add = std::min(h, room);
    acct.E += add;
    res.harvested += add;
    res.wasted += h - add;
  }

  double drain(double amount) {
    const double take = std::min(acct.E, amount);
    acct.E -= take;
    res.drained += take;
    res.deficit += amount - take;
    return take;
  }
};

}  // namespace

LsaResult schedule_lsa(std::vector<LsaJob> jobs, EnergyAccount acct, const LsaOptions& opt) {
  Lsa s;
  acct.E = std::clamp(acct.E, 0.0, acct.C);
  s.acct = acct;
  s.res.E_initial = acct.E;

  const std::size_t n = jobs.size();
  std::vector<std::uint64_t> remaining(n);
  std::vector<bool> finished(n, false);
  for (std::size_t i = 0; i < n; ++i) remaining[i] = jobs[i].steps;

  double max_ps = acct.P_S.at(0);
  for (std::uint64_t tc = 0;;) {
    const auto nc = acct.P_S.next_change(tc);
    if (!nc) break;
    tc = *nc;
    max_ps = std::max(max_ps, acct.P_S.at(tc));
  }
  for (const auto& j : jobs)
    if (acct.slice_cost(j.steps) > acct.C && max_ps < acct.P_d1) s.res.infeasible.push_back(j.id);

  auto run_steps = [&](std::size_t j, std::uint64_t steps) -> std::pair<std::uint64_t, bool> {
    if (opt.runner) return opt.runner(jobs[j].id, steps);
    const auto exec = std::min(steps, remaining[j]);
    return {exec, exec == remaining[j]};
  };
  auto complete = [&](std::size_t j) {
    finished[j] = true;
    remaining[j] = 0;
    s.res.completion_order.push_back(jobs[j].id);
  };

  std::size_t done = 0;
  for (std::uint64_t slices = 0; done < n && slices < opt.max_slices; ++slices) {
    std::vector<std::size_t> ready;
    std::optional<std::uint64_t> next_arrival;
    for (std::size_t i = 0; i < n; ++i) {
      if (finished[i]) continue;
      if (jobs[i].arrival <= s.t) ready.push_back(i);
      else if (!next_arrival || jobs[i].arrival < *next_arrival) next_arrival = jobs[i].arrival;
    }
    std::sort(ready.begin(), ready.end(), [&](std::size_t a, std::size_t b) { return lsa_before(jobs[a], jobs[b]); });

    // Deadline reached: finish by draining the remaining demand at once.
    bool forced_any = false;
    for (std::size_t j : ready) {
      if (jobs[j].deadline > s.t) continue;
      const double need = s.acct.slice_cost(remaining[j]);
      const double got = s.drain(need);
      if (got + 1e-12 < need) s.res.missed.push_back(jobs[j].id);
      run_steps(j, remaining[j]);
      s.res.trace.push_back({s.t, jobs[j].id, remaining[j], s.acct.E, true});
      complete(j);
      ++done;
      forced_any = true;
    }
    if (forced_any) continue;

    if (ready.empty()) {
      if (!next_arrival) break;
      s.harvest(*next_arrival);
      s.res.trace.push_back({s.t, -1, 0, s.acct.E, false});
      s.t = *next_arrival;
      continue;
    }

    const double ps = s.acct.P_S.at(s.t);
    const double ts = s.acct.C <= 0 ? std::numeric_limits<double>::infinity()
                                    : predicted_runtime(s.acct.E, s.acct.P_d1, ps);
    std::optional<std::size_t> pick;
    for (std::size_t j : ready) {
      const double tj = static_cast<double>(remaining[j]) * s.acct.t1;
      if (tj <= ts) {
        pick = j;
        break;
      }
    }

    if (!pick) {
      // Lazy: wait for energy, an arrival, a deadline or a power change.
      std::uint64_t next = UINT64_MAX;
      if (next_arrival) next = std::min(next, *next_arrival);
      for (std::size_t j : ready) next = std::min(next, jobs[j].deadline);
      if (const auto c = s.acct.P_S.next_change(s.t)) next = std::min(next, *c);
      if (ps > 0) {
        const std::size_t head = ready.front();
        const double need = static_cast<double>(remaining[head]) * s.acct.t1 * (s.acct.P_d1 - ps) * 1e-6;
        if (need <= s.acct.C) {
          const double wait = std::ceil((need - s.acct.E) / (ps * 1e-6));
          if (wait >= 1) next = std::min<std::uint64_t>(next, s.t + static_cast<std::uint64_t>(wait));
          else next = std::min<std::uint64_t>(next, s.t + 1);
        }
      }
      if (next <= s.t) next = s.t + 1;
      s.harvest(next);
      s.res.trace.push_back({s.t, -1, 0, s.acct.E, false});
      s.t = next;
      continue;
    }

    const std::size_t j = *pick;
    const auto [exec, fin] = run_steps(j, std::min(opt.slice_steps, remaining[j]));
    const auto dt = static_cast<std::uint64_t>(std::ceil(static_cast<double>(exec) * s.acct.t1));
    s.harvest(s.t + dt);
    s.drain(s.acct.slice_cost(exec));
    s.t += dt;
    s.res.trace.push_back({s.t - dt, jobs[j].id, exec, s.acct.E, false});
    remaining[j] -= std::min(remaining[j], exec);
    if (fin || remaining[j] == 0) {
      complete(j);
      ++done;
    }
  }
  s.res.E_final = s.acct.E;
  s.res.end_time = s.t;
  return s.res;
}

}  // namespace rexa
