// Command line front end: repl, run, gen-isa, bench, eff, checkpoint, serve.

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>

#include "rexa/bench.hpp"
#include "rexa/callgate.hpp"
#include "rexa/error.hpp"
#include "rexa/host.hpp"
#include "rexa/isa.hpp"

namespace fs = std::filesystem;
using namespace rexa;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCompile = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitConfig = 3;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

std::string_view as_chars(std::span<const std::uint8_t> b) { return {reinterpret_cast<const char*>(b.data()), b.size()}; }

/// Word set from REXA_TABLES, if set.
const isa::Isa* env_isa() {
  static std::unique_ptr<isa::Isa> loaded;
  static bool tried = false;
  if (!tried) {
    tried = true;
    if (const char* p = std::getenv("REXA_TABLES"); p && *p) {
      const std::string blob = read_file(p);
      loaded = std::make_unique<isa::Isa>(
          isa::Isa::from_artifact({reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()}));
    }
  }
  return loaded.get();
}

host::NodeConfig node_config(const std::string& path) {
  host::NodeConfig cfg = path.empty() ? host::NodeConfig{} : host::NodeConfig::from_json(read_file(path));
  cfg.isa = env_isa();
  return cfg;
}

/// Trace directory sink: console, `out` stream and DAC capture files.
void write_trace(const fs::path& dir, const ScriptResult& res, const host::Node& node) {
  fs::create_directories(dir);
  write_file(dir / "console.txt", res.console);
  write_file(dir / "out.txt", res.stream);
  std::ostringstream dac;
  dac << "time_us,value\n";
  for (const auto& s : node.dac_capture()) dac << s.time_us << ',' << s.value << '\n';
  write_file(dir / "dac.csv", dac.str());
  std::ostringstream tr;
  for (const auto& [req, resp] : res.transcript)
    tr << "req 0x" << std::hex << static_cast<int>(req.type) << " -> resp 0x" << static_cast<int>(resp.type) << std::dec
       << " output " << resp.output.size() << " chunks\n";
  write_file(dir / "transcript.txt", tr.str());
}

int cmd_repl(bool use_lst) {
  VmConfig cfg;
  cfg.cs_size = 16384;
  cfg.persistent_frames = true;
  cfg.lookup = use_lst ? isa::LookupMode::lst : isa::LookupMode::pht;
  const isa::Isa* custom = env_isa();
  Vm vm(cfg, custom ? *custom : isa::Isa::default_isa());
  register_dsp_library(vm);
  CallGate gate(vm);
  bool line_start = true;
  gate.set_tap([&line_start](std::uint8_t, std::string_view text) {
    if (text.empty()) return;
    std::cout << text << std::flush;
    line_start = text.back() == '\n';
  });
  const bool tty = isatty(0);
  std::string line;
  for (;;) {
    if (tty) std::cout << "> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Request req;
    req.type = RequestType::exec;
    req.text = line;
    const Response r = gate.vmsys(req);
    if (r.type != ResponseType::ok) {
      if (!line_start) std::cout << "\n";
      line_start = true;
    }
    switch (r.type) {
      case ResponseType::compile_error:
        std::cout << "error: " << r.message << " (offset " << r.offset << ")\n";
        break;
      case ResponseType::vm_error:
        std::cout << "exception: " << exception_name(r.code) << " (" << r.code << ")\n";
        break;
      case ResponseType::suspended:
        std::cout << "suspended at " << r.pc << "\n";
        break;
      case ResponseType::error:
        std::cout << "error: " << r.message << "\n";
        break;
      default:
        if (tty) std::cout << " ok\n";
        if (tty) line_start = true;
        break;
    }
    std::cout << std::flush;
  }
  return kExitOk;
}

int cmd_run(const std::string& file, const std::string& node_cfg, const std::string& trace, bool shared,
            std::uint32_t slices) {
  const std::string source = read_file(file);
  host::Node node(node_config(node_cfg));
  ScriptResult res;
  if (shared) {
    CallGate gate(node.vm());
    res = run_script([&](const Request& r) { return gate.vmsys(r); }, source, slices);
  } else {
    MessageGate gate(node.vm(), nullptr);
    GateClient client([&](std::span<const std::uint8_t> f) { return gate.handle(f); });
    res = run_script([&](const Request& r) { return client.call(r); }, source, slices);
  }
  std::cout << res.console << res.stream << std::flush;
  if (!trace.empty()) write_trace(trace, res, node);
  if (res.exit_code) std::cerr << "rexa: " << res.error << "\n";
  return res.exit_code;
}

int cmd_gen_isa(const std::string& config, const std::string& out, const std::string& header) {
  const isa::Isa table(isa::load_wordlist(read_file(config)));
  const auto blob = isa::write_artifact(table);
  write_file(out, as_chars(blob));
  if (!header.empty()) write_file(header, isa::write_source_constants(table));
  std::cout << "words " << table.words().size() << "\nPHT bytes " << table.pht().storage_bytes() << "\nLST bytes "
            << table.lst().size_bytes() << "\nLST slices " << table.lst().slices << "\nartifact bytes "
            << blob.size() << "\n";
  return kExitOk;
}

int cmd_bench(double seconds, int repeats) {
  BenchOptions opt;
  opt.min_seconds = seconds;
  opt.repeats = repeats;
  std::cout << run_bench(opt).to_string();
  return kExitOk;
}

int cmd_checkpoint_save(const std::string& file, const std::string& program, const std::string& node_cfg,
                        std::size_t slices) {
  host::Node node(node_config(node_cfg));
  CallGate gate(node.vm());
  gate.set_tap([](std::uint8_t, std::string_view text) { std::cout << text; });
  const CompileResult c = node.vm().compile(read_file(program));
  node.vm().spawn(c.frame);
  const RunOutcome o = node.vm().run(slices);
  Request req;
  req.type = RequestType::checkpoint;
  const Response r = gate.vmsys(req);
  if (r.type != ResponseType::ok) throw Error(r.message);
  write_file(file, as_chars(r.body));
  std::cout << std::flush;
  std::cerr << "saved " << r.body.size() << " bytes after " << o.slices << " slices, " << node.vm().live_tasks()
            << " live tasks\n";
  return kExitOk;
}

int cmd_checkpoint_restore(const std::string& file, const std::string& node_cfg) {
  host::Node node(node_config(node_cfg));
  const std::string blob = read_file(file);
  node.vm().restore({reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()});
  node.vm().set_output([](std::uint8_t, std::string_view text) { std::cout << text; });
  const RunOutcome o = node.vm().run();
  std::cout << std::flush;
  if (o.error) {
    std::cerr << "rexa: uncaught exception " << exception_name(o.error) << "\n";
    return kExitRuntime;
  }
  if (o.status != RunStatus::done) {
    std::cerr << "rexa: program blocked\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_serve(const std::string& node_cfg, int port) {
  host::Node node(node_config(node_cfg));
  if (port <= 0) {
    MessageGate gate(node.vm(), [](std::vector<std::uint8_t> bytes) {
      std::fwrite(bytes.data(), 1, bytes.size(), stdout);
      std::fflush(stdout);
    });
    std::vector<std::uint8_t> buf(4096);
    for (;;) {
      const ssize_t n = ::read(0, buf.data(), buf.size());
      if (n <= 0) break;
      gate.submit({buf.data(), static_cast<std::size_t>(n)});
      gate.pump();
    }
    return kExitOk;
  }
  MessageGate gate(node.vm(), nullptr);
  std::mutex mu;
  httplib::Server server;
  server.Post("/vmsys", [&](const httplib::Request& req, httplib::Response& res) {
    std::vector<std::uint8_t> reply;
    {
      std::lock_guard lock(mu);
      reply = gate.handle({reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()});
    }
    res.set_content(std::string(as_chars(reply)), "application/octet-stream");
  });
  std::cerr << "rexa: serving the message gate on 127.0.0.1:" << port << "/vmsys\n";
  if (!server.listen("127.0.0.1", port)) throw ConfigError("cannot listen on port " + std::to_string(port));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rexa: stack-machine VM for tiny sensor nodes"};
  app.require_subcommand(1);

  auto* repl = app.add_subcommand("repl", "Interactive line-at-a-time compile and run");
  bool repl_lst = false;
  repl->add_flag("--lst", repl_lst, "Use the linear search table for word lookup");

  auto* run = app.add_subcommand("run", "Run a program on a simulated node through the message gate");
  std::string run_file, run_node, run_trace;
  bool run_shared = false;
  std::uint32_t run_slices = 1024;
  run->add_option("file", run_file, "Program source")->required();
  run->add_option("--node", run_node, "Node configuration (JSON)");
  run->add_option("--trace", run_trace, "Directory for console/out/DAC traces");
  run->add_flag("--shared", run_shared, "Use the in-process gate instead of the message gate");
  run->add_option("--slices", run_slices, "Slices per run request")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-isa", "Generate lookup tables from a word-list configuration");
  std::string gen_config, gen_out, gen_header;
  gen->add_option("config", gen_config, "Word list (JSON)")->required();
  gen->add_option("-o,--output", gen_out, "Table artifact path")->required();
  gen->add_option("--header", gen_header, "Also emit the tables as C++ source constants");

  auto* bench = app.add_subcommand("bench", "Measure MWPS and MCPS");
  double bench_seconds = 0.15;
  int bench_repeats = 3;
  bench->add_option("--seconds", bench_seconds, "Minimum seconds per measurement");
  bench->add_option("--repeats", bench_repeats, "Measurements per metric (median reported)");

  auto* eff = app.add_subcommand("eff", "Normalized performance factor C*M/(A*P)");
  double eC = 0, eM = 0, eA = 0, eP = 0;
  eff->add_option("C", eC, "MIPS")->required();
  eff->add_option("M", eM, "Memory in kB")->required();
  eff->add_option("A", eA, "Chip area in mm^2")->required();
  eff->add_option("P", eP, "Power in mW")->required();

  auto* cp = app.add_subcommand("checkpoint", "Save or restore VM state");
  cp->require_subcommand(1);
  auto* cp_save = cp->add_subcommand("save", "Run a program for some slices and save the state");
  std::string cps_file, cps_program, cps_node;
  std::size_t cps_slices = 10;
  cp_save->add_option("file", cps_file, "Checkpoint output")->required();
  cp_save->add_option("--program", cps_program, "Program source")->required();
  cp_save->add_option("--node", cps_node, "Node configuration (JSON)");
  cp_save->add_option("--slices", cps_slices, "Slices to run before saving");
  auto* cp_restore = cp->add_subcommand("restore", "Restore a checkpoint and run it to completion");
  std::string cpr_file, cpr_node;
  cp_restore->add_option("file", cpr_file, "Checkpoint input")->required();
  cp_restore->add_option("--node", cpr_node, "Node configuration (JSON)");

  auto* serve = app.add_subcommand("serve", "Expose the message gate over stdio or HTTP");
  std::string serve_node;
  int serve_port = 0;
  serve->add_option("--node", serve_node, "Node configuration (JSON)");
  serve->add_option("--port", serve_port, "Serve POST /vmsys on this port instead of stdio");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*repl) return cmd_repl(repl_lst);
    if (*run) return cmd_run(run_file, run_node, run_trace, run_shared, run_slices);
    if (*gen) return cmd_gen_isa(gen_config, gen_out, gen_header);
    if (*bench) return cmd_bench(bench_seconds, bench_repeats);
    if (*eff) {
      std::cout << efficiency(eC, eM, eA, eP) << "\n";
      return kExitOk;
    }
    if (*cp_save) return cmd_checkpoint_save(cps_file, cps_program, cps_node, cps_slices);
    if (*cp_restore) return cmd_checkpoint_restore(cpr_file, cpr_node);
    if (*serve) return cmd_serve(serve_node, serve_port);
  } catch (const CompileError& e) {
    std::cerr << "rexa: compile error at offset " << e.offset() << ": " << e.message() << "\n";
    return kExitCompile;
  } catch (const ConfigError& e) {
    std::cerr << "rexa: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TableError& e) {
    std::cerr << "rexa: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "rexa: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "rexa: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
