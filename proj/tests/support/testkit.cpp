#include "testkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#ifndef REXA_FIXTURE_DIR
#define REXA_FIXTURE_DIR "tests/fixtures"
#endif

namespace testkit {

std::filesystem::path fixture_dir() { return REXA_FIXTURE_DIR; }

std::string read_fixture(const std::string& name) {
  std::ifstream in(fixture_dir() / name, std::ios::binary);
  if (!in) throw std::runtime_error("missing fixture " + name);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

namespace {

class Generator {
 public:
  Generator(std::mt19937_64& rng, const ProgramOptions& opt) : rng_(rng), opt_(opt) {}

  std::string run() {
    const int vars = pick(1, 3);
    for (int k = 0; k < vars; ++k) {
      const std::string name = "va" + std::to_string(k);
      out_ << "var " << name << " " << lit(-50, 50) << " " << name << " !\n";
      vars_.push_back(name);
    }
    out_ << "var vl0 var vl1 var vd1\n";
    if (opt_.arrays) {
      const int arrays = pick(0, 2);
      for (int k = 0; k < arrays; ++k) {
        const std::string name = "ar" + std::to_string(k);
        const int len = pick(2, 8);
        if (chance(0.5)) {
          out_ << "array " << name << " {";
          for (int e = 0; e < len; ++e) out_ << " " << lit(-300, 300);
          out_ << " }\n";
        } else {
          out_ << "array " << name << " " << len << "\n";
        }
        arrays_.push_back({name, len});
      }
    }
    if (opt_.definitions) {
      const int defs = pick(0, 3);
      for (int k = 0; k < defs; ++k) {
        const std::string name = "wd" + std::to_string(k);
        out_ << ": " << name << " ";
        budget_ = pick(3, 8);
        block(1, 1, 1, true);
        out_ << " ;\n";
        words_.push_back(name);
      }
    }
    budget_ = opt_.statements;
    block(0, pick(0, 3), 0, false);
    out_ << "\n";
    return out_.str();
  }

 private:
  struct Arr {
    std::string name;
    int len;
  };

  int pick(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }
  std::string lit(int lo, int hi) { return std::to_string(pick(lo, hi)); }
  std::string nonzero() {
    int v = pick(-40, 40);
    return std::to_string(v == 0 ? 7 : v);
  }

  // Emits statements moving the depth from `d` to exactly `target`.
  void block(int d, int target, int loops, bool in_def) {
    while (budget_ > 0) {
      --budget_;
      d = statement(d, loops, in_def);
      out_ << (chance(0.15) ? "\n" : " ");
      if (chance(0.1)) break;
    }
    while (d > target) {
      out_ << (chance(0.5) || d < 2 ? "drop " : "nip ");
      --d;
    }
    while (d < target) {
      out_ << lit(-99, 99) << " ";
      ++d;
    }
  }

  int statement(int d, int loops, bool in_def) {
    const bool room = d < opt_.max_depth;
    switch (pick(0, 21)) {
      case 0:
      case 1:
        if (!room) return d;
        out_ << literal();
        return d + 1;
      case 2:
        if (d < 1) return d;
        out_ << one_of({"negate", "abs", "1+", "1-", "2*", "2/", "not", "0=", "0<"});
        return d;
      case 3:
      case 4:
        if (d < 2) return d;
        out_ << one_of({"+", "-", "*", "and", "or", "xor", "min", "max", "=", "<>", "<", ">", "<=", ">="});
        return d - 1;
      case 5:
        if (d < 1) return d;
        out_ << nonzero() << (chance(0.5) ? " /" : " mod");
        return d;
      case 6:
        if (d >= 2 && room) {
          out_ << one_of({"swap", "over", "tuck", "nip", "2dup", "dup"});
          return d + stack_delta_last_;
        }
        if (d >= 1 && room) {
          out_ << "dup";
          return d + 1;
        }
        return d;
      case 7:
        if (d >= 3) out_ << (chance(0.5) ? "rot" : "-rot");
        return d;
      case 8:
        if (d < 1) return d;
        if (opt_.output) out_ << (chance(0.7) ? "." : "out");
        else out_ << "drop";
        return d - 1;
      case 9: {
        const std::string& v = vars_[static_cast<std::size_t>(pick(0, static_cast<int>(vars_.size()) - 1))];
        if (d >= 1 && chance(0.5)) {
          out_ << v << " !";
          return d - 1;
        }
        if (!room) return d;
        out_ << v << " @";
        return d + 1;
      }
      case 10: {
        if (arrays_.empty() || !room) return d;
        const Arr& a = arrays_[static_cast<std::size_t>(pick(0, static_cast<int>(arrays_.size()) - 1))];
        if (d >= 1 && chance(0.5)) {
          out_ << pick(0, a.len - 1) << " " << a.name << " write";
          return d - 1;
        }
        out_ << pick(0, a.len - 1) << " " << a.name << " read";
        return d + 1;
      }
      case 11:
      case 12: {
        if (loops >= 2) return d;
        const int n = pick(0, opt_.max_loop);
        const bool plus = chance(0.25);
        out_ << n << " 0 do ";
        ++do_depth_;
        int inner = d;
        if (room && chance(0.6)) {
          out_ << (do_depth_ >= 2 && chance(0.4) ? "j " : "i ");
          inner = d + 1;
        }
        block(inner, d, loops + 1, in_def);
        --do_depth_;
        out_ << (plus ? std::to_string(pick(1, 3)) + " +loop" : "loop");
        return d;
      }
      case 13: {
        if (d < 1) return d;
        out_ << "if ";
        block(d - 1, d - 1, loops, in_def);
        if (chance(0.5)) {
          out_ << "else ";
          block(d - 1, d - 1, loops, in_def);
        }
        out_ << "endif";
        return d - 1;
      }
      case 14: {
        if (loops >= 2) return d;
        const std::string counter = (in_def ? "vd" : "vl") + std::to_string(loops);
        out_ << pick(1, 6) << " " << counter << " ! begin ";
        block(d, d, loops + 1, in_def);
        out_ << counter << " @ 1- dup " << counter << " ! 0= until";
        return d;
      }
      case 15: {
        if (words_.empty() || d < 1) return d;
        out_ << words_[static_cast<std::size_t>(pick(0, static_cast<int>(words_.size()) - 1))];
        return d;
      }
      case 16:
        if (opt_.yields) out_ << "yield";
        return d;
      case 17:
        if (opt_.output) out_ << ".\" t" << pick(0, 99) << "\"";
        return d;
      case 18:
        out_ << "( note " << pick(0, 9) << " )";
        return d;
      case 19:
        if (d < 2) return d;
        out_ << nonzero() << " */";
        return d - 1;
      case 20:
        if (!room) return d;
        if (d >= 1 && chance(0.5)) {
          out_ << pick(0, d - 1) << " pick";
          return d + 1;
        }
        out_ << "depth";
        return d + 1;
      default:
        if (d < 1) return d;
        out_ << pick(0, 15) << (chance(0.5) ? " lshift" : " rshift");
        return d;
    }
  }

  std::string literal() {
    switch (pick(0, 5)) {
      case 0:
        return lit(-32768, 32767);
      case 1:
        return lit(8190, 8194);
      case 2:
        return lit(-8194, -8190);
      default:
        return lit(-200, 200);
    }
  }

  std::string one_of(std::initializer_list<const char*> xs) {
    const auto k = static_cast<std::size_t>(pick(0, static_cast<int>(xs.size()) - 1));
    const std::string w = *(xs.begin() + static_cast<std::ptrdiff_t>(k));
    stack_delta_last_ = (w == "over" || w == "tuck" || w == "dup") ? 1 : w == "2dup" ? 2 : w == "nip" ? -1 : 0;
    return w;
  }

  std::mt19937_64& rng_;
  ProgramOptions opt_;
  std::ostringstream out_;
  std::vector<std::string> vars_;
  std::vector<Arr> arrays_;
  std::vector<std::string> words_;
  int budget_ = 0;
  int stack_delta_last_ = 0;
  int do_depth_ = 0;  // enclosing do loops within the current definition
};

}  // namespace

std::string random_program(std::mt19937_64& rng, const ProgramOptions& opt) { return Generator(rng, opt).run(); }

void Capture::attach(rexa::Vm& vm) {
  vm.set_output([this](std::uint8_t ch, std::string_view text) {
    (ch == 0 ? console : stream).append(text);
  });
}

std::vector<rexa::Cell> run_to_end(rexa::Vm& vm, const std::string& source, Capture* cap) {
  if (cap) cap->attach(vm);
  const rexa::CompileResult c = vm.compile(source);
  const int id = vm.spawn(c.frame);
  const rexa::RunOutcome o = vm.run_frame(c.frame);
  if (o.status != rexa::RunStatus::done) throw std::runtime_error("program did not finish");
  const rexa::Task* t = vm.task(id);
  if (t->error) throw std::runtime_error("uncaught exception " + std::string(rexa::exception_name(t->error)));
  const auto s = t->ds.contents();
  return {s.begin(), s.end()};
}

rexa::Selection naive_select(const std::vector<rexa::MaskState>& states, const std::vector<std::uint64_t>& timeouts,
                             std::uint64_t now, const std::vector<bool>& event_ready, std::size_t ready_from) {
  for (std::size_t i = 0; i < states.size(); ++i)
    if (states[i] == rexa::MaskState::event && event_ready[i]) return {static_cast<int>(i), rexa::WakeReason::event};
  for (std::size_t i = 0; i < states.size(); ++i)
    if (states[i] == rexa::MaskState::timeout && now >= timeouts[i])
      return {static_cast<int>(i), rexa::WakeReason::timeout};
  for (std::size_t k = 0; k < states.size(); ++k) {
    const std::size_t i = (ready_from + k) % states.size();
    if (states[i] == rexa::MaskState::ready) return {static_cast<int>(i), rexa::WakeReason::ready};
  }
  return {};
}

EdfTrace edf_reference(const std::vector<rexa::LsaJob>& jobs, std::uint64_t slice_steps, double t1) {
  struct J {
    rexa::LsaJob job;
    std::uint64_t left;
    bool done = false;
  };
  std::vector<J> js;
  for (const auto& j : jobs) js.push_back({j, j.steps});
  auto earlier = [](const rexa::LsaJob& a, const rexa::LsaJob& b) {
    return std::tie(a.deadline, b.priority, a.arrival, a.id) < std::tie(b.deadline, a.priority, b.arrival, b.id);
  };
  EdfTrace tr;
  std::uint64_t t = 0;
  for (;;) {
    std::vector<J*> ready;
    std::uint64_t next_arrival = UINT64_MAX;
    for (auto& j : js) {
      if (j.done) continue;
      if (j.job.arrival <= t) ready.push_back(&j);
      else next_arrival = std::min(next_arrival, j.job.arrival);
    }
    if (ready.empty()) {
      if (next_arrival == UINT64_MAX) break;
      t = next_arrival;
      continue;
    }
    std::sort(ready.begin(), ready.end(), [&](J* a, J* b) { return earlier(a->job, b->job); });
    bool forced = false;
    for (J* j : ready) {
      if (j->job.deadline > t) continue;
      tr.slices.push_back(j->job.id);
      tr.completion.push_back(j->job.id);
      j->done = true;
      forced = true;
    }
    if (forced) continue;
    J* j = ready.front();
    const std::uint64_t run = std::min(slice_steps, j->left);
    tr.slices.push_back(j->job.id);
    t += static_cast<std::uint64_t>(std::ceil(static_cast<double>(run) * t1));
    j->left -= run;
    if (j->left == 0) {
      j->done = true;
      tr.completion.push_back(j->job.id);
    }
  }
  return tr;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::int64_t scale_ref(std::int64_t v, std::int64_t s) {
  if (s > 0) return v * s;
  if (s < 0) return v / -s;
  return v;
}

rexa::Cell sat_ref(std::int64_t v) {
  return static_cast<rexa::Cell>(std::clamp<std::int64_t>(v, -32768, 32767));
}

}  // namespace testkit
