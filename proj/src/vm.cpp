#include "rexa/vm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <string>
#include <thread>
#include <unordered_map>

#include "rexa/bytecode.hpp"
#include "rexa/dsp.hpp"
#include "rexa/error.hpp"

namespace rexa {

namespace {

constexpr Cell kHandlerMarker = -1;
constexpr Cell kNestedMarker = -2;
constexpr std::uint64_t kNestedStepLimit = 1u << 22;
constexpr std::uint64_t kNever = std::numeric_limits<std::uint64_t>::max();

std::uint64_t steady_ns() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

Cell flag(bool b) { return b ? Cell{-1} : Cell{0}; }

}  // namespace

// ---------------------------------------------------------------------------
// Instruction semantics

struct VmOps {
  static void next(Task& t, int n = 1) { t.pc += n; }
  static std::uint16_t operand(Vm& vm, Task& t) { return read_u16(vm.cs_.data() + t.pc + 1); }

  template <typename F>
  static void binary(Task& t, F f) {
    t.ds.require(2);
    const Cell b = t.ds.pop();
    const Cell a = t.ds.pop();
    t.ds.push(f(static_cast<std::int32_t>(a), static_cast<std::int32_t>(b)));
    next(t);
  }
  template <typename F>
  static void unary(Task& t, F f) {
    Cell& a = t.ds.at_top(0);
    a = f(static_cast<std::int32_t>(a));
    next(t);
  }
  template <typename F>
  static void dbinary(Task& t, F f) {
    t.ds.require(4);
    const std::int32_t b = t.ds.pop2().value();
    const std::int32_t a = t.ds.pop2().value();
    f(t, a, b);
    next(t);
  }

  // Stack
  static void dup(Vm&, Task& t) {
    const Cell a = t.ds.peek(0);
    t.ds.push(a);
    next(t);
  }
  static void drop(Vm&, Task& t) {
    t.ds.pop();
    next(t);
  }
  static void swap(Vm&, Task& t) {
    t.ds.require(2);
    std::swap(t.ds.at_top(0), t.ds.at_top(1));
    next(t);
  }
  static void over(Vm&, Task& t) {
    const Cell a = t.ds.peek(1);
    t.ds.push(a);
    next(t);
  }
  static void rot(Vm&, Task& t) {  // a b c -- b c a
    t.ds.require(3);
    const Cell a = t.ds.at_top(2);
    t.ds.at_top(2) = t.ds.at_top(1);
    t.ds.at_top(1) = t.ds.at_top(0);
    t.ds.at_top(0) = a;
    next(t);
  }
  static void minus_rot(Vm&, Task& t) {  // a b c -- c a b
    t.ds.require(3);
    const Cell c = t.ds.at_top(0);
    t.ds.at_top(0) = t.ds.at_top(1);
    t.ds.at_top(1) = t.ds.at_top(2);
    t.ds.at_top(2) = c;
    next(t);
  }
  static void nip(Vm&, Task& t) {
    const Cell b = t.ds.pop();
    t.ds.at_top(0) = b;
    next(t);
  }
  static void tuck(Vm&, Task& t) {  // a b -- b a b
    t.ds.require(2);
    t.ds.require_room(1);
    const Cell b = t.ds.pop();
    const Cell a = t.ds.pop();
    t.ds.push(b);
    t.ds.push(a);
    t.ds.push(b);
    next(t);
  }
  static void pick(Vm&, Task& t) {
    const Cell n = t.ds.pop();
    if (n < 0) throw VmFault(ExceptionCode::stack);
    const Cell v = t.ds.peek(static_cast<std::size_t>(n));
    t.ds.push(v);
    next(t);
  }
  static void depth(Vm&, Task& t) {
    t.ds.push(static_cast<Cell>(t.ds.top()));
    next(t);
  }
  static void two_dup(Vm&, Task& t) {
    t.ds.require(2);
    t.ds.require_room(2);
    const Cell a = t.ds.peek(1);
    const Cell b = t.ds.peek(0);
    t.ds.push(a);
    t.ds.push(b);
    next(t);
  }
  static void two_drop(Vm&, Task& t) {
    t.ds.require(2);
    t.ds.set_top(t.ds.top() - 2);
    next(t);
  }

  // Arithmetic and logic
  static void add(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a + b); });
  }
  static void sub(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a - b); });
  }
  static void mul(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a * b); });
  }
  static void div(Vm&, Task& t) {
    if (t.ds.peek(0) == 0) throw VmFault(ExceptionCode::divbyzero);
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a / b); });
  }
  static void mod(Vm&, Task& t) {
    if (t.ds.peek(0) == 0) throw VmFault(ExceptionCode::divbyzero);
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a % b); });
  }
  static void mul_div(Vm&, Task& t) {  // a b c -- a*b/c
    t.ds.require(3);
    const std::int64_t c = t.ds.pop();
    if (c == 0) throw VmFault(ExceptionCode::divbyzero);
    const std::int64_t b = t.ds.pop();
    const std::int64_t a = t.ds.pop();
    t.ds.push(wrap_cell(a * b / c));
    next(t);
  }
  static void negate(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return wrap_cell(-a); });
  }
  static void abs(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return wrap_cell(a < 0 ? -a : a); });
  }
  static void min(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return static_cast<Cell>(std::min(a, b)); });
  }
  static void max(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return static_cast<Cell>(std::max(a, b)); });
  }
  static void inc(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return wrap_cell(a + 1); });
  }
  static void dec(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return wrap_cell(a - 1); });
  }
  static void two_mul(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return wrap_cell(a * 2); });
  }
  static void two_div(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return static_cast<Cell>(a >> 1); });
  }
  static void lshift(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t n) {
      return (n < 0 || n > 15) ? Cell{0} : wrap_cell(static_cast<std::int64_t>(static_cast<std::uint16_t>(a)) << n);
    });
  }
  static void rshift(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t n) {
      return (n < 0 || n > 15) ? Cell{0} : wrap_cell(static_cast<std::uint16_t>(a) >> n);
    });
  }
  static void and_(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a & b); });
  }
  static void or_(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a | b); });
  }
  static void xor_(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return wrap_cell(a ^ b); });
  }
  static void not_(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return flag(a == 0); });
  }
  static void eq(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return flag(a == b); });
  }
  static void ne(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return flag(a != b); });
  }
  static void lt(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return flag(a < b); });
  }
  static void gt(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return flag(a > b); });
  }
  static void le(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return flag(a <= b); });
  }
  static void ge(Vm&, Task& t) {
    binary(t, [](std::int32_t a, std::int32_t b) { return flag(a >= b); });
  }
  static void zero_eq(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return flag(a == 0); });
  }
  static void zero_lt(Vm&, Task& t) {
    unary(t, [](std::int32_t a) { return flag(a < 0); });
  }

  // Double words
  static std::int32_t wrap32(std::int64_t v) { return static_cast<std::int32_t>(static_cast<std::uint32_t>(v)); }
  static void d_add(Vm&, Task& t) {
    dbinary(t, [](Task& tt, std::int32_t a, std::int32_t b) { tt.ds.push2(wrap32(std::int64_t{a} + b)); });
  }
  static void d_sub(Vm&, Task& t) {
    dbinary(t, [](Task& tt, std::int32_t a, std::int32_t b) { tt.ds.push2(wrap32(std::int64_t{a} - b)); });
  }
  static void d_eq(Vm&, Task& t) {
    dbinary(t, [](Task& tt, std::int32_t a, std::int32_t b) { tt.ds.push(flag(a == b)); });
  }
  static void d_negate(Vm&, Task& t) {
    const std::int32_t a = t.ds.pop2().value();
    t.ds.push2(wrap32(-std::int64_t{a}));
    next(t);
  }
  static void d_print(Vm& vm, Task& t) {
    const std::int32_t a = t.ds.pop2().value();
    vm.emit_output(0, std::to_string(a) + " ");
    next(t);
  }
  static void s_to_d(Vm&, Task& t) {
    const Cell a = t.ds.pop();
    t.ds.push2(static_cast<std::int32_t>(a));
    next(t);
  }
  static void d_to_s(Vm&, Task& t) {
    const std::int32_t a = t.ds.pop2().value();
    t.ds.push(wrap_cell(a));
    next(t);
  }

  // Memory
  static void fetch(Vm& vm, Task& t) {
    const Cell h = t.ds.pop();
    t.ds.push(vm.cell_get(h));
    next(t);
  }
  static void store(Vm& vm, Task& t) {
    t.ds.require(2);
    const Cell h = t.ds.pop();
    const Cell v = t.ds.pop();
    vm.cell_set(h, v);
    next(t);
  }
  static Cell elem_get(Vm& vm, Cell h, std::int32_t i) {
    if (i < 0 || static_cast<std::size_t>(i) >= vm.array_length(h)) throw VmFault(ExceptionCode::io);
    if (h < 0) return wrap_cell(vm.ios_.dios_read(dios_index(h), static_cast<std::size_t>(i)));
    const std::uint8_t* p = vm.cs_.data() + h + 2 + 2 * i;
    return static_cast<Cell>(read_u16(p));
  }
  static void elem_set(Vm& vm, Cell h, std::int32_t i, Cell v) {
    if (i < 0 || static_cast<std::size_t>(i) >= vm.array_length(h)) throw VmFault(ExceptionCode::io);
    if (h < 0) {
      vm.ios_.dios_write(dios_index(h), static_cast<std::size_t>(i), v);
      return;
    }
    write_u16(vm.cs_.data() + h + 2 + 2 * i, static_cast<std::uint16_t>(v));
  }
  static bool dios_scalar(Vm& vm, Cell h) {
    const auto idx = dios_index(h);
    if (idx >= vm.ios_.dios_count()) throw VmFault(ExceptionCode::io);
    return vm.ios_.dios(idx).scalar();
  }
  static void read(Vm& vm, Task& t) {
    const Cell h = t.ds.peek(0);
    if (h < 0 && dios_scalar(vm, h)) {
      t.ds.at_top(0) = wrap_cell(vm.ios_.dios_read(dios_index(h), 0));
    } else {
      t.ds.require(2);
      const Cell idx = t.ds.peek(1);
      const Cell v = elem_get(vm, h, idx);
      t.ds.pop();
      t.ds.at_top(0) = v;
    }
    next(t);
  }
  static void write(Vm& vm, Task& t) {
    const Cell h = t.ds.peek(0);
    if (h < 0 && dios_scalar(vm, h)) {
      t.ds.require(2);
      vm.ios_.dios_write(dios_index(h), 0, t.ds.peek(1));
      t.ds.set_top(t.ds.top() - 2);
    } else {
      t.ds.require(3);
      elem_set(vm, h, t.ds.peek(1), t.ds.peek(2));
      t.ds.set_top(t.ds.top() - 3);
    }
    next(t);
  }
  // Softcore stacks: cell 0 counts the stored values, which follow it.
  static void push(Vm& vm, Task& t) {
    t.ds.require(2);
    const Cell h = t.ds.peek(0);
    const Cell count = elem_get(vm, h, 0);
    if (count < 0 || static_cast<std::size_t>(count) + 1 >= vm.array_length(h)) throw VmFault(ExceptionCode::stack);
    elem_set(vm, h, count + 1, t.ds.peek(1));
    elem_set(vm, h, 0, static_cast<Cell>(count + 1));
    t.ds.set_top(t.ds.top() - 2);
    next(t);
  }
  static void pop(Vm& vm, Task& t) {
    const Cell h = t.ds.peek(0);
    const Cell count = elem_get(vm, h, 0);
    if (count <= 0) throw VmFault(ExceptionCode::stack);
    const Cell v = elem_get(vm, h, count);
    elem_set(vm, h, 0, static_cast<Cell>(count - 1));
    t.ds.at_top(0) = v;
    next(t);
  }
  static void get(Vm& vm, Task& t) {
    t.ds.require(2);
    const Cell h = t.ds.peek(0);
    const Cell n = t.ds.peek(1);
    const Cell count = elem_get(vm, h, 0);
    if (n < 0 || n >= count) throw VmFault(ExceptionCode::stack);
    const Cell v = elem_get(vm, h, count - n);
    t.ds.pop();
    t.ds.at_top(0) = v;
    next(t);
  }

  // Loops
  static void loop_i(Vm& vm, Task& t) {
    t.ds.push(vm.loop_stack(t).peek(0));
    next(t);
  }
  static void loop_j(Vm& vm, Task& t) {
    t.ds.push(vm.loop_stack(t).peek(2));
    next(t);
  }
  static void op_do(Vm& vm, Task& t) {  // limit start --
    t.ds.require(2);
    Stack& ls = vm.loop_stack(t);
    ls.require_room(2);
    const Cell start = t.ds.pop();
    const Cell limit = t.ds.pop();
    ls.push(limit);
    ls.push(start);
    next(t);
  }
  static void op_loop(Vm& vm, Task& t) {
    Stack& ls = vm.loop_stack(t);
    ls.require(2);
    const std::int32_t idx = ls.peek(0) + 1;
    if (idx < ls.peek(1)) {
      ls.at_top(0) = static_cast<Cell>(idx);
      t.pc = operand(vm, t);
    } else {
      ls.set_top(ls.top() - 2);
      next(t, 3);
    }
  }
  static void op_plus_loop(Vm& vm, Task& t) {
    Stack& ls = vm.loop_stack(t);
    ls.require(2);
    const Cell n = t.ds.pop();
    const std::int32_t idx = ls.peek(0) + static_cast<std::int32_t>(n);
    const std::int32_t limit = ls.peek(1);
    const bool more = n >= 0 ? idx < limit : idx >= limit;
    if (more && idx >= -32768 && idx <= 32767) {
      ls.at_top(0) = static_cast<Cell>(idx);
      t.pc = operand(vm, t);
    } else {
      ls.set_top(ls.top() - 2);
      next(t, 3);
    }
  }

  // Control flow
  static void op_branch(Vm& vm, Task& t) { t.pc = operand(vm, t); }
  static void op_zero_branch(Vm& vm, Task& t) {
    const Cell f = t.ds.pop();
    if (f == 0) t.pc = operand(vm, t);
    else next(t, 3);
  }
  static void op_call(Vm& vm, Task& t) {
    const std::uint16_t target = operand(vm, t);
    t.rs.push(static_cast<Cell>(t.pc + 3));
    if (vm.cfg_.profile)
      t.calls.push_back({target, static_cast<std::uint16_t>(t.rs.top()), vm.exec_count_});
    t.pc = target;
  }
  static void op_exit(Vm& vm, Task& t) {
    if (t.rs.empty()) {
      vm.finish(t);
      return;
    }
    const Cell r = t.rs.pop();
    while (!t.calls.empty() && t.calls.back().rs_depth > t.rs.top()) {
      const auto& c = t.calls.back();
      vm.profile_.record_word(c.word, vm.exec_count_ - c.steps_at_entry);
      t.calls.pop_back();
    }
    if (t.catch_point.set && t.rs.top() < t.catch_point.rs) t.catch_point.set = false;
    if (r >= 0) {
      t.pc = r;
    } else if (r == kHandlerMarker) {
      const Cell resume = t.rs.pop();
      vm.after_handler(t, static_cast<std::uint16_t>(resume));
    } else if (r == kNestedMarker) {
      vm.nested_done_ = true;
    } else {
      throw VmFault(ExceptionCode::trap);
    }
  }
  static void op_ios(Vm& vm, Task& t) {
    vm.call_fios(t, operand(vm, t));
    next(t, 3);
  }
  static void op_addr(Vm& vm, Task& t) {
    t.ds.push(static_cast<Cell>(operand(vm, t)));
    next(t, 3);
  }
  static void op_str(Vm& vm, Task& t) {
    const std::uint8_t n = vm.cs_.data()[t.pc + 1];
    if (static_cast<std::size_t>(t.pc) + 2 + n > vm.cs_.size()) throw VmFault(ExceptionCode::trap);
    vm.emit_output(0, std::string_view(reinterpret_cast<const char*>(vm.cs_.data() + t.pc + 2), n));
    next(t, 2 + n);
  }
  static void op_var(Vm&, Task& t) { next(t, 3); }
  static void op_array(Vm& vm, Task& t) { next(t, 3 + 2 * operand(vm, t)); }
  static void op_end(Vm& vm, Task& t) { vm.finish(t); }
  static void op_trap(Vm&, Task&) { throw VmFault(ExceptionCode::trap); }

  // Output and host streams
  static void print(Vm& vm, Task& t) {
    vm.emit_output(0, std::to_string(t.ds.pop()) + " ");
    next(t);
  }
  static void cr(Vm& vm, Task& t) {
    vm.emit_output(0, "\n");
    next(t);
  }
  static void emit(Vm& vm, Task& t) {
    const char c = static_cast<char>(t.ds.pop() & 0xFF);
    vm.emit_output(0, std::string_view(&c, 1));
    next(t);
  }
  static void out(Vm& vm, Task& t) {
    vm.emit_output(1, std::to_string(t.ds.pop()) + "\n");
    next(t);
  }
  static HostPort& host(Vm& vm) {
    if (!vm.host_) throw VmFault(ExceptionCode::io);
    return *vm.host_;
  }
  static void in(Vm& vm, Task& t) {
    HostPort& h = host(vm);
    t.ds.require_room(1);
    if (h.input_ready()) {
      if (const auto v = h.input()) {
        t.ds.push(*v);
        next(t);
        return;
      }
    }
    vm.suspend(t, WaitKind::input, static_cast<std::uint16_t>(t.pc));
  }
  static void receive(Vm& vm, Task& t) {
    HostPort& h = host(vm);
    const Cell src = t.ds.peek(0);
    if (const auto v = h.link_receive(src)) {
      t.ds.at_top(0) = *v;
      next(t);
      return;
    }
    vm.suspend(t, WaitKind::receive, static_cast<std::uint16_t>(t.pc));
  }
  static void send(Vm& vm, Task& t) {
    HostPort& h = host(vm);
    t.ds.require(2);
    const Cell dst = t.ds.peek(0);
    const Cell v = t.ds.peek(1);
    if (h.link_send(dst, std::span<const Cell>(&v, 1))) {
      t.ds.set_top(t.ds.top() - 2);
      next(t);
      return;
    }
    vm.suspend(t, WaitKind::send, static_cast<std::uint16_t>(t.pc));
  }
  static void sendn(Vm& vm, Task& t) {  // length offset data dst --
    HostPort& h = host(vm);
    t.ds.require(4);
    const Cell dst = t.ds.peek(0);
    const Cell data = t.ds.peek(1);
    const Cell off = t.ds.peek(2);
    const Cell len = t.ds.peek(3);
    if (len < 0) throw VmFault(ExceptionCode::io);
    std::vector<Cell> values(static_cast<std::size_t>(len));
    for (Cell k = 0; k < len; ++k) values[static_cast<std::size_t>(k)] = elem_get(vm, data, off + k);
    if (h.link_send(dst, values)) {
      t.ds.set_top(t.ds.top() - 4);
      next(t);
      return;
    }
    vm.suspend(t, WaitKind::sendn, static_cast<std::uint16_t>(t.pc));
  }

  // Scheduling
  static void yield(Vm& vm, Task& t) {
    next(t);
    vm.suspend(t, WaitKind::yield, static_cast<std::uint16_t>(t.pc));
  }
  static void sleep(Vm& vm, Task& t) {
    const Cell ms = t.ds.pop();
    next(t);
    if (ms <= 0) {
      vm.suspend(t, WaitKind::yield, static_cast<std::uint16_t>(t.pc));
      return;
    }
    t.timeout = vm.now_us() + static_cast<std::uint64_t>(ms) * 1000;
    vm.suspend(t, WaitKind::sleep, static_cast<std::uint16_t>(t.pc));
  }
  static void await(Vm& vm, Task& t) {  // ms value var -- status
    t.ds.require(3);
    const Cell var = t.ds.peek(0);
    vm.cell_get(var);  // validates the guard handle
    const Cell value = t.ds.peek(1);
    const Cell ms = t.ds.peek(2);
    t.ds.set_top(t.ds.top() - 3);
    next(t);
    t.guard = Guard{var, value};
    t.timeout = vm.now_us() + static_cast<std::uint64_t>(std::max<Cell>(ms, 0)) * 1000;
    vm.suspend(t, WaitKind::await, static_cast<std::uint16_t>(t.pc));
  }
  static void task(Vm& vm, Task& t) {  // prio deadline funcref -- id
    t.ds.require(3);
    const Cell f = t.ds.pop();
    const Cell deadline = t.ds.pop();
    const Cell prio = t.ds.pop();
    if (f < 0) throw VmFault(ExceptionCode::trap);
    int id = -1;
    try {
      id = vm.spawn_word(f, t.frame, prio,
                         deadline > 0 ? static_cast<std::uint64_t>(deadline) * 1000 : 0);
    } catch (const Error&) {
      id = -1;
    }
    t.ds.push(static_cast<Cell>(id));
    next(t);
  }
  static void end(Vm& vm, Task& t) { vm.finish(t); }

  // Exceptions
  static void catch_(Vm&, Task& t) {
    t.ds.push(t.pending);
    t.pending = 0;
    t.catch_point = {true, static_cast<std::uint16_t>(t.pc), static_cast<std::uint16_t>(t.ds.top() - 1),
                     static_cast<std::uint16_t>(t.rs.top()), static_cast<std::uint16_t>(t.fs.top())};
    next(t);
  }
  static void throw_(Vm& vm, Task& t) {
    const Cell code = t.ds.pop();
    if (code == 0) {
      next(t);
      return;
    }
    vm.raise(t, code);
  }
  static void exception(Vm& vm, Task& t) {  // funcref code --
    t.ds.require(2);
    const Cell code = t.ds.pop();
    const Cell f = t.ds.pop();
    if (code <= 0) throw VmFault(ExceptionCode::trap);
    vm.handlers_[code] = f;
    next(t);
  }

  // Vector operations
  static std::vector<Cell> scale_of(Vm& vm, Cell h) { return h == 0 ? std::vector<Cell>{} : vm.array_get(h); }
  template <typename F>
  static void dsp_call(F f) {
    try {
      f();
    } catch (const DspError&) {
      throw VmFault(ExceptionCode::trap);
    }
  }
  static void vecload(Vm& vm, Task& t) {  // src off dst --
    t.ds.require(3);
    const Cell dst = t.ds.pop(), off = t.ds.pop(), src = t.ds.pop();
    if (off < 0) throw VmFault(ExceptionCode::io);
    auto s = vm.array_get(src);
    auto d = vm.array_get(dst);
    dsp_call([&] { dsp::vecload(s, static_cast<std::size_t>(off), d); });
    vm.array_set(dst, d);
    next(t);
  }
  static void vecscale(Vm& vm, Task& t) {  // src dst scale --
    t.ds.require(3);
    const Cell sc = t.ds.pop(), dst = t.ds.pop(), src = t.ds.pop();
    auto s = vm.array_get(src);
    auto d = vm.array_get(dst);
    const auto k = scale_of(vm, sc);
    dsp_call([&] { dsp::vecscale(s, d, k); });
    vm.array_set(dst, d);
    next(t);
  }
  template <bool Mul>
  static void vecarith(Vm& vm, Task& t) {  // a b dst scale --
    t.ds.require(4);
    const Cell sc = t.ds.pop(), dst = t.ds.pop(), b = t.ds.pop(), a = t.ds.pop();
    auto va = vm.array_get(a);
    auto vb = vm.array_get(b);
    auto d = vm.array_get(dst);
    const auto k = scale_of(vm, sc);
    dsp_call([&] {
      if constexpr (Mul) dsp::vecmul(va, vb, d, k);
      else dsp::vecadd(va, vb, d, k);
    });
    vm.array_set(dst, d);
    next(t);
  }
  static void vecfold(Vm& vm, Task& t) {  // in wgt out scale --
    t.ds.require(4);
    const Cell sc = t.ds.pop(), out = t.ds.pop(), w = t.ds.pop(), in = t.ds.pop();
    auto vi = vm.array_get(in);
    auto vw = vm.array_get(w);
    auto vo = vm.array_get(out);
    const auto k = scale_of(vm, sc);
    dsp_call([&] { dsp::vecfold(vi, vw, vo, k); });
    vm.array_set(out, vo);
    next(t);
  }
  static void vecmap(Vm& vm, Task& t) {  // src dst func scale --
    t.ds.require(4);
    const Cell sc = t.ds.peek(0), f = t.ds.peek(1), dst = t.ds.peek(2), src = t.ds.peek(3);
    t.ds.set_top(t.ds.top() - 4);
    auto s = vm.array_get(src);
    auto d = vm.array_get(dst);
    const auto k = scale_of(vm, sc);
    dsp_call([&] { dsp::vecmap(s, d, [&](Cell x) -> std::int32_t { return vm.apply(f, x); }, k); });
    vm.array_set(dst, d);
    next(t);
  }
  static void dotprod(Vm& vm, Task& t) {  // a b -- d
    t.ds.require(2);
    const Cell b = t.ds.pop(), a = t.ds.pop();
    const auto va = vm.array_get(a);
    const auto vb = vm.array_get(b);
    std::int32_t r = 0;
    dsp_call([&] { r = dsp::dotprod(va, vb); });
    t.ds.push2(r);
    next(t);
  }
  static void vecprint(Vm& vm, Task& t) {
    const Cell h = t.ds.pop();
    std::string s;
    for (Cell v : vm.array_get(h)) s += std::to_string(v) + " ";
    vm.emit_output(0, s);
    next(t);
  }

  static const std::unordered_map<std::string_view, Vm::OpFn>& by_tag() {
    static const std::unordered_map<std::string_view, Vm::OpFn> m{
        {"dup", dup},
        {"drop", drop},
        {"swap", swap},
        {"over", over},
        {"rot", rot},
        {"minus_rot", minus_rot},
        {"nip", nip},
        {"tuck", tuck},
        {"pick", pick},
        {"depth", depth},
        {"two_dup", two_dup},
        {"two_drop", two_drop},
        {"add", add},
        {"sub", sub},
        {"mul", mul},
        {"div", div},
        {"mod", mod},
        {"mul_div", mul_div},
        {"negate", negate},
        {"abs", abs},
        {"min", min},
        {"max", max},
        {"inc", inc},
        {"dec", dec},
        {"two_mul", two_mul},
        {"two_div", two_div},
        {"lshift", lshift},
        {"rshift", rshift},
        {"and", and_},
        {"or", or_},
        {"xor", xor_},
        {"not", not_},
        {"eq", eq},
        {"ne", ne},
        {"lt", lt},
        {"gt", gt},
        {"le", le},
        {"ge", ge},
        {"zero_eq", zero_eq},
        {"zero_lt", zero_lt},
        {"d_add", d_add},
        {"d_sub", d_sub},
        {"d_eq", d_eq},
        {"d_negate", d_negate},
        {"d_print", d_print},
        {"s_to_d", s_to_d},
        {"d_to_s", d_to_s},
        {"fetch", fetch},
        {"store", store},
        {"read", read},
        {"write", write},
        {"push", push},
        {"pop", pop},
        {"get", get},
        {"loop_i", loop_i},
        {"loop_j", loop_j},
        {"exit", op_exit},
        {"print", print},
        {"cr", cr},
        {"emit", emit},
        {"out", out},
        {"in", in},
        {"yield", yield},
        {"sleep", sleep},
        {"await", await},
        {"task", task},
        {"end", end},
        {"receive", receive},
        {"send", send},
        {"sendn", sendn},
        {"catch", catch_},
        {"throw", throw_},
        {"exception", exception},
        {"vecload", vecload},
        {"vecscale", vecscale},
        {"vecadd", vecarith<false>},
        {"vecmul", vecarith<true>},
        {"vecfold", vecfold},
        {"vecmap", vecmap},
        {"dotprod", dotprod},
        {"vecprint", vecprint},
        // Compile-time constructs never appear as opcodes in compiled code.
        {"colon", op_trap},
        {"semicolon", op_trap},
        {"var", op_trap},
        {"array", op_trap},
        {"const", op_trap},
        {"address_of", op_trap},
        {"import", op_trap},
        {"export", op_trap},
        {"if", op_trap},
        {"else", op_trap},
        {"endif", op_trap},
        {"do", op_trap},
        {"loop", op_trap},
        {"plus_loop", op_trap},
        {"begin", op_trap},
        {"until", op_trap},
        {"again", op_trap},
        {"while", op_trap},
        {"repeat", op_trap},
        {"dot_quote", op_trap},
    };
    return m;
  }

  /// Words that may run through a function reference (vecmap, handlers).
  static bool callable(std::string_view tag) {
    static const std::unordered_map<std::string_view, bool> blocked{
        {"exit", true},  {"in", true},      {"yield", true}, {"sleep", true}, {"await", true},
        {"task", true},  {"end", true},     {"receive", true}, {"send", true}, {"sendn", true},
        {"catch", true}, {"throw", true},   {"exception", true}};
    return by_tag().at(tag) != op_trap && !blocked.contains(tag);
  }
};

// ---------------------------------------------------------------------------
// Vm

Vm::Vm(VmConfig cfg, const isa::Isa& isa)
    : cfg_(cfg), isa_(&isa), cs_(cfg.cs_size), dict_(cfg.dict_capacity) {
  if (cfg_.max_tasks == 0 || cfg_.max_tasks > TaskMask::kMaxTasks)
    throw ConfigError("max_tasks must be in 1.." + std::to_string(TaskMask::kMaxTasks));
  if (cfg_.ds_size == 0 || cfg_.rs_size == 0 || (!cfg_.merge_fs && cfg_.fs_size == 0))
    throw ConfigError("stack sizes must be positive");
  if (cfg_.ds_size > 0x7FFF || cfg_.rs_size > 0x7FFF || cfg_.fs_size > 0x7FFF)
    throw ConfigError("stack sizes must stay below 32768 cells");
  if (cfg_.steps == 0) throw ConfigError("slice step budget must be positive");
  if (!(cfg_.t1_ns > 0)) throw ConfigError("t1 must be positive");
  tasks_.resize(cfg_.max_tasks);
  for (std::size_t i = 0; i < tasks_.size(); ++i) tasks_[i].id = static_cast<int>(i);
  wall_origin_ns_ = steady_ns();
  build_dispatch();
}

void Vm::reset() {
  cs_ = CodeSegment(cfg_.cs_size);
  dict_.clear();
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    tasks_[i] = Task();
    tasks_[i].id = static_cast<int>(i);
  }
  handlers_.clear();
  profile_.clear();
  clock_ns_ = 0;
  total_steps_ = 0;
  exec_count_ = 0;
  arrival_seq_ = 0;
  ready_from_ = 0;
  cur_ = nullptr;
  stop_ = false;
  nested_ = 0;
}

void Vm::build_dispatch() {
  dispatch_.fill(&VmOps::op_trap);
  const auto& tags = VmOps::by_tag();
  for (const auto& w : isa_->words()) {
    const auto it = tags.find(w.tag);
    if (it == tags.end()) throw ConfigError("word '" + w.name + "' has unknown semantics tag '" + w.tag + "'");
    dispatch_[w.opcode] = it->second;
  }
  dispatch_[op::kBranch] = &VmOps::op_branch;
  dispatch_[op::kZeroBranch] = &VmOps::op_zero_branch;
  dispatch_[op::kCall] = &VmOps::op_call;
  dispatch_[op::kExit] = &VmOps::op_exit;
  dispatch_[op::kIos] = &VmOps::op_ios;
  dispatch_[op::kAddr] = &VmOps::op_addr;
  dispatch_[op::kLit] = &VmOps::op_addr;
  dispatch_[op::kStr] = &VmOps::op_str;
  dispatch_[op::kVar] = &VmOps::op_var;
  dispatch_[op::kArray] = &VmOps::op_array;
  dispatch_[op::kDo] = &VmOps::op_do;
  dispatch_[op::kLoop] = &VmOps::op_loop;
  dispatch_[op::kPlusLoop] = &VmOps::op_plus_loop;
  dispatch_[op::kEnd] = &VmOps::op_end;
  dispatch_[op::kReserved] = &VmOps::op_trap;
  dispatch_[op::kTrap] = &VmOps::op_trap;
}

inline void Vm::step(Task& t) {
  const std::uint32_t pc = static_cast<std::uint32_t>(t.pc);
  if (pc >= cs_.size()) throw VmFault(ExceptionCode::trap);
  const std::uint8_t* p = cs_.data() + pc;
  ++exec_count_;
  if (*p & 0x80) {
    const DecodedLiteral d = decode_literal(p);
    if (d.is_double) t.ds.push2(d.value);
    else t.ds.push(static_cast<Cell>(d.value));
    t.pc = static_cast<std::int32_t>(pc + d.length);
    return;
  }
  dispatch_[*p](*this, t);
}

CompileResult Vm::compile(std::string_view source, CompileObserver* observer) {
  std::uint16_t id = 0;
  try {
    CodeFrame& f = cs_.alloc(source.size() + 2);
    id = f.id;
    std::memcpy(cs_.data() + f.start, source.data(), source.size());
    // One spare byte lets a trailing literal expand before the end marker.
    cs_.data()[f.start + source.size()] = 0;
  } catch (const CsExhausted& e) {
    throw CompileError(CompileErrorKind::cs_exhausted, 0, 0, e.what());
  }
  CompileContext ctx{cs_, dict_, *isa_, ios_, cfg_.lookup, observer};
  try {
    CompileResult r = compile_frame(ctx, id);
    if (cfg_.persistent_frames) cs_.find(id)->persistent = true;
    return r;
  } catch (...) {
    if (CodeFrame* f = cs_.find(id)) {
      f->locked = false;
      f->persistent = false;
      dict_.remove_frame(id);
      cs_.free(id);
    }
    throw;
  }
}

void Vm::free_frame(std::uint16_t frame) {
  const CodeFrame* f = cs_.find(frame);
  if (!f) throw Error("no such code frame: " + std::to_string(frame));
  const CodeFrame snapshot = *f;
  cs_.free(frame);  // throws FrameLocked before anything is touched
  dict_.remove_frame(frame);
  std::erase_if(handlers_, [&](const auto& kv) {
    return kv.second >= 0 && snapshot.contains(static_cast<std::uint32_t>(kv.second));
  });
}

void Vm::reclaim_if_done(std::uint16_t frame) {
  const CodeFrame* f = cs_.find(frame);
  if (!f || f->live_tasks || f->locked || f->persistent) return;
  free_frame(frame);
}

Task& Vm::new_task(std::uint16_t frame, std::uint16_t pc, int priority, std::uint64_t relative_deadline_us) {
  CodeFrame* f = cs_.find(frame);
  if (!f) throw Error("no such code frame: " + std::to_string(frame));
  if (f->state != FrameState::compiled) throw Error("code frame " + std::to_string(frame) + " is not compiled");
  auto it = std::find_if(tasks_.begin(), tasks_.end(), [](const Task& t) { return !t.live(); });
  if (it == tasks_.end()) throw Error("task table full (" + std::to_string(tasks_.size()) + " tasks)");
  Task& t = *it;
  const int id = t.id;
  t = Task();
  t.id = id;
  t.ds = Stack(cfg_.ds_size);
  t.rs = Stack(cfg_.rs_size);
  t.fs = Stack(cfg_.merge_fs ? 0 : cfg_.fs_size);
  t.state = TaskState::ready;
  t.pc = pc;
  t.frame = frame;
  t.priority = priority;
  t.arrival = now_us();
  t.deadline = relative_deadline_us ? t.arrival + relative_deadline_us : 0;
  ++f->live_tasks;
  ++arrival_seq_;
  return t;
}

int Vm::spawn(std::uint16_t frame, int priority, std::uint64_t relative_deadline_us) {
  const CodeFrame* f = cs_.find(frame);
  if (!f) throw Error("no such code frame: " + std::to_string(frame));
  return new_task(frame, static_cast<std::uint16_t>(f->start), priority, relative_deadline_us).id;
}

int Vm::spawn_word(Cell funcref, std::uint16_t frame, int priority, std::uint64_t relative_deadline_us) {
  if (funcref < 0 || static_cast<std::size_t>(funcref) >= cs_.size()) throw Error("task entry must be a user word");
  return new_task(frame, static_cast<std::uint16_t>(funcref), priority, relative_deadline_us).id;
}

const Task* Vm::task(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tasks_.size()) return nullptr;
  return &tasks_[static_cast<std::size_t>(id)];
}

std::size_t Vm::live_tasks() const {
  return static_cast<std::size_t>(std::count_if(tasks_.begin(), tasks_.end(), [](const Task& t) { return t.live(); }));
}

std::size_t Vm::live_tasks(std::uint16_t frame) const {
  return static_cast<std::size_t>(
      std::count_if(tasks_.begin(), tasks_.end(), [&](const Task& t) { return t.live() && t.frame == frame; }));
}

std::uint64_t Vm::now_us() const {
  if (cfg_.clock == ClockMode::wall) return (steady_ns() - wall_origin_ns_) / 1000;
  return clock_ns_ / 1000;
}

void Vm::advance_clock(std::uint64_t us) {
  if (cfg_.clock == ClockMode::simulated) clock_ns_ += us * 1000;
}

void Vm::set_clock(std::uint64_t us) {
  if (cfg_.clock == ClockMode::simulated) clock_ns_ = std::max(clock_ns_, us * 1000);
}

void Vm::emit_output(std::uint8_t channel, std::string_view text) {
  if (output_) output_(channel, text);
}

std::uint16_t Vm::cs_addr(Cell handle, std::size_t bytes) const {
  if (handle < 0 || static_cast<std::size_t>(handle) + bytes > cs_.size()) throw VmFault(ExceptionCode::io);
  return static_cast<std::uint16_t>(handle);
}

Cell Vm::cell_get(Cell handle) const {
  if (handle < 0) return wrap_cell(ios_.dios_read(dios_index(handle), 0));
  return static_cast<Cell>(read_u16(cs_.data() + cs_addr(handle, 2)));
}

void Vm::cell_set(Cell handle, Cell v) {
  if (handle < 0) {
    ios_.dios_write(dios_index(handle), 0, v);
    return;
  }
  write_u16(cs_.data() + cs_addr(handle, 2), static_cast<std::uint16_t>(v));
}

std::size_t Vm::array_length(Cell handle) const {
  if (handle < 0) {
    const auto idx = dios_index(handle);
    if (idx >= ios_.dios_count()) throw VmFault(ExceptionCode::io);
    return ios_.dios(idx).cells;
  }
  const std::size_t n = read_u16(cs_.data() + cs_addr(handle, 2));
  cs_addr(handle, 2 + 2 * n);
  return n;
}

std::vector<Cell> Vm::array_get(Cell handle) const {
  const std::size_t n = array_length(handle);
  std::vector<Cell> v(n);
  if (handle < 0) {
    for (std::size_t i = 0; i < n; ++i) v[i] = wrap_cell(ios_.dios_read(dios_index(handle), i));
  } else {
    const std::uint8_t* p = cs_.data() + handle + 2;
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Cell>(read_u16(p + 2 * i));
  }
  return v;
}

void Vm::array_set(Cell handle, std::span<const Cell> values) {
  const std::size_t n = array_length(handle);
  if (values.size() > n) throw VmFault(ExceptionCode::io);
  if (handle < 0) {
    for (std::size_t i = 0; i < values.size(); ++i) ios_.dios_write(dios_index(handle), i, values[i]);
  } else {
    std::uint8_t* p = cs_.data() + handle + 2;
    for (std::size_t i = 0; i < values.size(); ++i) write_u16(p + 2 * i, static_cast<std::uint16_t>(values[i]));
  }
}

void Vm::call_fios(Task& t, std::uint16_t index) {
  if (index >= ios_.fios_count()) throw VmFault(ExceptionCode::trap);
  const FiosEntry& e = ios_.fios(index);
  t.ds.require(e.arg_cells());
  std::array<std::int32_t, 8> args{};
  for (int k = e.args - 1; k >= 0; --k) {
    if (e.argsize > 2) args[static_cast<std::size_t>(k)] = t.ds.pop2().value();
    else args[static_cast<std::size_t>(k)] = t.ds.pop();
  }
  t.ds.require_room(e.ret_cells());
  IosCall call{*this, std::span<const std::int32_t>(args.data(), e.args)};
  std::int32_t r = 0;
  try {
    r = e.callback(call);
  } catch (const VmFault&) {
    throw;
  } catch (const Error&) {
    throw VmFault(ExceptionCode::io);
  }
  if (e.retsize > 2) t.ds.push2(r);
  else if (e.retsize > 0) t.ds.push(wrap_cell(r));
}

void Vm::run_nested(Task& t, std::uint16_t addr) {
  if (nested_ >= 8) throw VmFault(ExceptionCode::trap);
  const std::int32_t saved_pc = t.pc;
  const bool saved_done = nested_done_;
  t.rs.push(kNestedMarker);
  const std::size_t base = t.rs.top() - 1;
  t.pc = addr;
  ++nested_;
  nested_done_ = false;
  std::uint64_t n = 0;
  try {
    while (!nested_done_) {
      if (++n > kNestedStepLimit) throw VmFault(ExceptionCode::trap);
      step(t);
    }
  } catch (const VmFault&) {
    --nested_;
    nested_done_ = saved_done;
    if (t.rs.top() > base) t.rs.set_top(base);
    if (t.catch_point.set && t.catch_point.rs > base) t.catch_point.set = false;
    while (!t.calls.empty() && t.calls.back().rs_depth > base) t.calls.pop_back();
    t.pc = saved_pc;
    t.steps += n;
    throw;
  }
  --nested_;
  nested_done_ = saved_done;
  t.pc = saved_pc;
  t.steps += n;
}

void Vm::exec_funcref(Task& t, Cell funcref) {
  if (funcref >= 0) {
    run_nested(t, static_cast<std::uint16_t>(funcref));
    return;
  }
  const int k = -static_cast<int>(funcref) - 1;
  if (k < 256) {
    const auto opc = static_cast<std::uint8_t>(k);
    if (opc >= isa_->words().size() || !VmOps::callable(isa_->words()[opc].tag)) throw VmFault(ExceptionCode::trap);
    const std::int32_t saved_pc = t.pc;
    dispatch_[opc](*this, t);
    t.pc = saved_pc;
    return;
  }
  call_fios(t, static_cast<std::uint16_t>(k - 256));
}

Cell Vm::apply(Cell funcref, Cell x) {
  if (!cur_) throw Error("apply() needs a running task");
  Task& t = *cur_;
  t.ds.push(x);
  exec_funcref(t, funcref);
  return t.ds.pop();
}

void Vm::suspend(Task& t, WaitKind kind, std::uint16_t resume) {
  if (nested_ > 0) throw VmFault(ExceptionCode::trap);
  t.wait = kind;
  t.pc = ~static_cast<std::int32_t>(resume);
  switch (kind) {
    case WaitKind::yield:
      t.state = TaskState::ready;
      break;
    case WaitKind::sleep:
      t.state = TaskState::waiting_time;
      break;
    default:
      t.state = TaskState::waiting_event;
      break;
  }
  stop_ = true;
}

void Vm::finish(Task& t) {
  if (nested_ > 0) throw VmFault(ExceptionCode::trap);
  const bool was_live = t.live();
  t.state = TaskState::finished;
  t.wait = WaitKind::none;
  t.guard.reset();
  t.calls.clear();
  stop_ = true;
  if (!was_live) return;
  if (CodeFrame* f = cs_.find(t.frame)) {
    if (f->live_tasks) --f->live_tasks;
    reclaim_if_done(t.frame);
  }
}

void Vm::terminate(Task& t, std::int16_t code) {
  t.error = code;
  t.in_handler = false;
  finish(t);
}

void Vm::raise(Task& t, std::int16_t code) {
  if (nested_ > 0) throw VmFault(code);
  if (t.in_handler) {
    terminate(t, code);
    return;
  }
  const auto resume = static_cast<std::uint16_t>(t.pc);
  const auto h = handlers_.find(code);
  if (h != handlers_.end()) {
    t.pending = code;
    t.handler_code = code;
    t.in_handler = true;
    if (h->second >= 0) {
      if (t.rs.capacity() - t.rs.top() < 2) {
        terminate(t, code);
        return;
      }
      t.rs.push(static_cast<Cell>(resume));
      t.rs.push(kHandlerMarker);
      t.pc = h->second;
      return;
    }
    try {
      exec_funcref(t, h->second);
    } catch (const VmFault&) {
      terminate(t, code);
      return;
    }
    after_handler(t, resume);
    return;
  }
  if (t.catch_point.set) {
    goto_catch(t, code);
    return;
  }
  terminate(t, code);
}

void Vm::after_handler(Task& t, std::uint16_t resume) {
  t.in_handler = false;
  const std::int16_t code = t.handler_code;
  if (t.catch_point.set) {
    goto_catch(t, code);
  } else if (t.resumable) {
    t.resumable = false;
    t.pending = 0;
    t.pc = resume;
  } else {
    terminate(t, code);
  }
}

void Vm::goto_catch(Task& t, std::int16_t code) {
  const CatchPoint cp = t.catch_point;
  t.pending = code;
  t.in_handler = false;
  t.resumable = false;
  if (t.rs.top() > cp.rs) t.rs.set_top(cp.rs);
  if (t.ds.top() > cp.ds) t.ds.set_top(cp.ds);
  if (!cfg_.merge_fs && t.fs.top() > cp.fs) t.fs.set_top(cp.fs);
  while (!t.calls.empty() && t.calls.back().rs_depth > t.rs.top()) t.calls.pop_back();
  t.pc = cp.pc;
}

bool Vm::event_ready(const Task& t) const {
  try {
    switch (t.wait) {
      case WaitKind::await:
        return now_us() >= t.timeout || (t.guard && cell_get(t.guard->handle) == t.guard->value);
      case WaitKind::input:
        return host_ && host_->input_ready();
      case WaitKind::receive:
        return host_ && host_->link_can_receive(t.ds.peek(0));
      case WaitKind::send:
        return host_ && host_->link_can_send(t.ds.peek(0), 1);
      case WaitKind::sendn:
        return host_ && host_->link_can_send(t.ds.peek(0), static_cast<std::size_t>(std::max<Cell>(t.ds.peek(3), 0)));
      default:
        return false;
    }
  } catch (const VmFault&) {
    return true;  // let the retried instruction raise the fault
  }
}

TaskMask Vm::mask() const {
  TaskMask m;
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    switch (tasks_[i].state) {
      case TaskState::ready:
      case TaskState::running:
        m.set(i, MaskState::ready);
        break;
      case TaskState::waiting_time:
        m.set(i, MaskState::timeout);
        break;
      case TaskState::waiting_event:
        m.set(i, MaskState::event);
        break;
      default:
        break;
    }
  }
  return m;
}

void Vm::wake(Task& t, WakeReason) {
  const WaitKind w = t.wait;
  t.wait = WaitKind::none;
  t.pc = t.resume_pc();
  t.state = TaskState::running;
  cur_ = &t;
  try {
    if (w == WaitKind::await) {
      bool ok = false;
      try {
        ok = t.guard && cell_get(t.guard->handle) == t.guard->value;
      } catch (const VmFault&) {
      }
      t.guard.reset();
      t.ds.push(ok ? 0 : 1);
    }
  } catch (const VmFault& f) {
    raise(t, f.code);
  }
  t.timeout = 0;
  if (!t.live()) return;
  const bool catchable_timeout = handlers_.contains(static_cast<std::int16_t>(ExceptionCode::timeout));
  const bool catchable_interrupt = handlers_.contains(static_cast<std::int16_t>(ExceptionCode::interrupt));
  if (t.deadline && !t.deadline_signalled && now_us() > t.deadline && (catchable_timeout || t.catch_point.set)) {
    t.deadline_signalled = true;
    t.resumable = true;
    raise(t, static_cast<std::int16_t>(ExceptionCode::timeout));
  } else if (t.preempted) {
    t.preempted = false;
    if (cfg_.preempt && (catchable_interrupt || t.catch_point.set)) {
      t.resumable = true;
      raise(t, static_cast<std::int16_t>(ExceptionCode::interrupt));
    }
  }
}

SliceInfo Vm::vmloop(int id, std::uint32_t steps, std::uint64_t longest_us) {
  Task& t = tasks_.at(static_cast<std::size_t>(id));
  SliceInfo info;
  info.task = id;
  info.start_us = now_us();
  if (!t.live()) {
    info.finished = true;
    info.error = t.error;
    return info;
  }
  if (t.pc < 0) t.pc = ~t.pc;
  t.state = TaskState::running;
  cur_ = &t;
  stop_ = false;

  const double budget_ns = static_cast<double>(longest_us) * 1000.0;
  std::uint64_t limit = steps;
  const bool wall = cfg_.clock == ClockMode::wall;
  if (!wall) {
    const auto by_time = static_cast<std::uint64_t>(std::ceil(budget_ns / cfg_.t1_ns));
    limit = std::min<std::uint64_t>(limit, std::max<std::uint64_t>(by_time, 1));
  }
  const std::uint64_t wall_start = wall ? steady_ns() : 0;
  std::uint64_t n = 0;
  bool cut = false;
  while (n < limit && !stop_) {
    try {
      if (wall) {
        while (n < limit && !stop_) {
          if (n > 0 && static_cast<double>(steady_ns() - wall_start) >= budget_ns) {
            cut = true;
            break;
          }
          step(t);
          ++n;
        }
        if (cut) break;
      } else {
        while (n < limit && !stop_) {
          step(t);
          ++n;
        }
      }
    } catch (const VmFault& f) {
      ++n;
      raise(t, f.code);
    }
  }
  if (!wall && !stop_ && n < steps) cut = true;
  cur_ = nullptr;
  t.steps += n;
  total_steps_ += n;
  if (!wall) clock_ns_ += static_cast<std::uint64_t>(std::llround(static_cast<double>(n) * cfg_.t1_ns));

  info.steps = static_cast<std::uint32_t>(n);
  if (t.state == TaskState::running) {
    t.state = TaskState::ready;
    t.preempted = cut;
    info.preempted = cut;
  }
  info.suspended = t.pc < 0;
  info.finished = t.state == TaskState::finished;
  info.error = t.error;
  return info;
}

SliceInfo Vm::slice() {
  if (hooks_) hooks_->before_slice(*this);
  const std::size_t n = tasks_.size();
  const TaskMask m = mask();
  std::array<std::uint64_t, TaskMask::kMaxTasks> timeouts{};
  std::array<bool, TaskMask::kMaxTasks> ready{};
  for (std::size_t i = 0; i < n; ++i) {
    const Task& t = tasks_[i];
    timeouts[i] = t.state == TaskState::waiting_time ? t.timeout : kNever;
    ready[i] = t.state == TaskState::waiting_event && event_ready(t);
  }
  const Selection s =
      select_next(m, n, std::span(timeouts.data(), n), now_us(), std::span(ready.data(), n), ready_from_);
  if (s.reason == WakeReason::ready) ready_from_ = static_cast<std::uint16_t>((s.task + 1) % n);
  SliceInfo info;
  if (s.task < 0) {
    info.start_us = now_us();
    if (hooks_) hooks_->after_slice(*this, info);
    return info;
  }
  Task& t = tasks_[static_cast<std::size_t>(s.task)];
  stop_ = false;
  wake(t, s.reason);
  if (t.live()) {
    info = vmloop(s.task, cfg_.steps, cfg_.longest_us);
  } else {
    cur_ = nullptr;
    info.task = s.task;
    info.start_us = now_us();
    info.finished = true;
    info.error = t.error;
  }
  info.reason = s.reason;
  if (cfg_.profile) profile_.record_slice(static_cast<std::uint32_t>(s.task), info.steps, info.suspended);
  if (hooks_) hooks_->after_slice(*this, info);
  return info;
}

std::optional<std::uint64_t> Vm::next_wakeup() const {
  std::uint64_t next = kNever;
  for (const Task& t : tasks_) {
    if (t.state == TaskState::waiting_time || (t.state == TaskState::waiting_event && t.wait == WaitKind::await))
      next = std::min(next, t.timeout);
  }
  if (hooks_)
    if (const auto e = hooks_->next_event_us(*this)) next = std::min(next, std::max(*e, now_us()));
  if (next == kNever) return std::nullopt;
  return next;
}

namespace {

template <typename Done>
RunOutcome run_until(Vm& vm, std::size_t max_slices, Done done) {
  RunOutcome o;
  std::size_t idle_spins = 0;
  while (o.slices < max_slices) {
    if (done()) {
      o.status = RunStatus::done;
      return o;
    }
    const SliceInfo si = vm.slice();
    if (si.task >= 0) {
      idle_spins = 0;
      ++o.slices;
      o.steps += si.steps;
      if (si.error && !o.error) {
        o.error = si.error;
        o.error_task = si.task;
      }
      continue;
    }
    if (done()) break;
    const std::uint64_t now = vm.now_us();
    const std::uint64_t next = vm.next_wakeup().value_or(kNever);
    if (next == kNever || ++idle_spins > 100000) {
      o.status = RunStatus::blocked;
      return o;
    }
    if (vm.config().clock == ClockMode::wall) {
      if (next > now) std::this_thread::sleep_for(std::chrono::microseconds(std::min<std::uint64_t>(next - now, 1000)));
    } else {
      vm.set_clock(std::max(next, now));
    }
  }
  o.status = done() ? RunStatus::done : RunStatus::budget;
  return o;
}

}  // namespace

RunOutcome Vm::run(std::size_t max_slices) {
  return run_until(*this, max_slices, [this] { return live_tasks() == 0; });
}

RunOutcome Vm::run_frame(std::uint16_t frame, std::size_t max_slices) {
  return run_until(*this, max_slices, [this, frame] { return live_tasks(frame) == 0; });
}

// ---------------------------------------------------------------------------
// DSP library

void register_dsp_library(Vm& vm) {
  IosTable& ios = vm.ios();
  ios.fios_add("sin", [](IosCall& c) { return std::int32_t{dsp::fpsin(static_cast<Cell>(c.args[0]))}; }, 1, 2, 2);
  ios.fios_add(
      "log", [](IosCall& c) { return std::int32_t{dsp::fplog10(static_cast<Cell>(c.args[0]))} * 10; }, 1, 2, 2);
  ios.fios_add(
      "sigmoid", [](IosCall& c) { return std::int32_t{dsp::fpsigmoid(static_cast<Cell>(c.args[0]))}; }, 1, 2, 2);
  ios.fios_add("relu", [](IosCall& c) { return std::int32_t{dsp::fprelu(static_cast<Cell>(c.args[0]))}; }, 1, 2, 2);
  using Filter = void (*)(std::span<Cell>, std::size_t, std::size_t, int);
  const auto filter = [](Filter f) {
    return [f](IosCall& c) -> std::int32_t {
      const auto h = static_cast<Cell>(c.args[0]);
      if (c.args[1] < 0 || c.args[2] < 0) throw VmFault(ExceptionCode::io);
      auto v = c.vm.array_get(h);
      try {
        f(v, static_cast<std::size_t>(c.args[1]), static_cast<std::size_t>(c.args[2]), c.args[3]);
      } catch (const DspError&) {
        throw VmFault(ExceptionCode::io);
      }
      c.vm.array_set(h, v);
      return 0;
    };
  };
  ios.fios_add("hull", filter(&dsp::hull), 4, 2, 0);
  ios.fios_add("lowp", filter(&dsp::lowp), 4, 2, 0);
  ios.fios_add("highp", filter(&dsp::highp), 4, 2, 0);
}

}  // namespace rexa
