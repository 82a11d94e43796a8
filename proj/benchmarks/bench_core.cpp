#include <benchmark/benchmark.h>

#include <memory>

#include "mpdc/adjoint.hpp"
#include "mpdc/dynamics.hpp"
#include "mpdc/ensemble.hpp"
#include "mpdc/field.hpp"
#include "mpdc/nn/param_field.hpp"
#include "mpdc/nn/tape.hpp"
#include "mpdc/verification.hpp"

namespace {

using namespace mpdc;

nn::FieldArchitecture hidden(int width) {
  nn::FieldArchitecture a;
  a.width = width;
  a.hidden_layers = 2;
  return a;
}

// Forward and reverse pass of a control network over a batch, args: d, batch.
void BM_TapeForwardBackward(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const int batch = static_cast<int>(state.range(1));
  nn::FieldArchitecture arch = hidden(64);
  arch.input_dim = d + 1;
  arch.output_dim = d;
  const nn::ParamField net(arch, 1);
  const Matrix inputs = Matrix::Random(d + 1, batch);
  for (auto _ : state) {
    nn::Tape tape;
    const nn::FieldGraph g = net.record(tape, inputs, false);
    const nn::Var loss = tape.sum(tape.square(g.output));
    tape.backward(loss);
    benchmark::DoNotOptimize(net.gather_param_grad(tape, g));
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_TapeForwardBackward)->Args({2, 1024})->Args({30, 1024})->Args({30, 8192});

void BM_ControlEval(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const ControlField u = make_control(d, hidden(64), 1, false);
  const Matrix x = Matrix::Random(d, n);
  for (auto _ : state) benchmark::DoNotOptimize(u.eval(x, 0.5));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_ControlEval)->Args({2, 4096})->Args({30, 1024});

// RK4 rollout over [0, 1] with dt = 0.01, args: d, N.
void BM_Rollout(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const ControlField u = make_control(d, hidden(32), 1, false);
  const ParticleEnsemble p = sample_initial(GaussianDensity{Vector::Zero(d), 1.0}, n, 2);
  const TimeGrid grid = TimeGrid::make(1.0, 0.01, {0.0, 0.25, 0.5, 0.75, 1.0});
  for (auto _ : state) benchmark::DoNotOptimize(rollout(p, u, grid));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Rollout)->Args({2, 1024})->Args({2, 4096})->Args({30, 1024})->Unit(benchmark::kMillisecond);

// Characteristics of the LQ adjoint, tabulated along N particles.
void BM_Characteristics(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const LQOracle lq;
  const ControlProblem problem = lq.problem();
  const auto u = lq.control_field();
  const ParticleEnsemble p = sample_initial(problem.initial, n, 3);
  const TimeGrid grid = TimeGrid::make(1.0, 0.01, {0.0, 0.25, 0.5, 0.75, 1.0});
  const auto traj = std::make_shared<const Trajectory>(rollout(p, *u, grid));
  const AdjointProblem adjoint{u, problem.reward, traj, lq.horizon};
  for (auto _ : state) benchmark::DoNotOptimize(solve_characteristics(adjoint, 0.01, true));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Characteristics)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

// Off-particle characteristics queries: phi at a batch of fresh points.
void BM_CharacteristicsQuery(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const LQOracle lq;
  const ControlProblem problem = lq.problem();
  const AdjointProblem adjoint{lq.control_field(), problem.reward, nullptr, lq.horizon};
  const auto solution = solve_characteristics(adjoint, 0.01, false);
  const Matrix x = Matrix::Random(2, m);
  for (auto _ : state) benchmark::DoNotOptimize(solution->values(x, 0.0));
  state.SetItemsProcessed(state.iterations() * m);
}
BENCHMARK(BM_CharacteristicsQuery)->Arg(256)->Arg(4096)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
