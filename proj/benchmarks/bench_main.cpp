// Microbenchmarks of the hot paths: matching, evaluation, detector forward and
// backward passes, and one adaptation objective evaluation.

#include "cahqp/evaluation.hpp"
#include "cahqp/matching.hpp"
#include "cahqp/pipeline.hpp"
#include "cahqp/vpg.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace cahqp;

namespace {

ag::Matrix random_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ag::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

void BM_SolveAssignment(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const ag::Matrix cost = random_matrix(n, n / 2, 1);
  for (auto _ : state) benchmark::DoNotOptimize(solve_assignment(cost));
}
BENCHMARK(BM_SolveAssignment)->Arg(6)->Arg(10)->Arg(32);

void BM_EvaluateMap(benchmark::State& state) {
  const int images = static_cast<int>(state.range(0));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.3), u(0.0, 1.0);
  std::uniform_int_distribution<int> k(0, 2);
  std::vector<std::vector<BoxLabel>> truth(static_cast<size_t>(images));
  std::vector<std::vector<ScoredBox>> preds(static_cast<size_t>(images));
  for (int i = 0; i < images; ++i) {
    for (int j = 0; j < 4; ++j) truth[static_cast<size_t>(i)].push_back({k(rng), {c(rng), c(rng), s(rng), s(rng)}});
    for (int j = 0; j < 10; ++j) preds[static_cast<size_t>(i)].push_back({{k(rng), {c(rng), c(rng), s(rng), s(rng)}}, u(rng)});
  }
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_map(preds, truth, 3));
}
BENCHMARK(BM_EvaluateMap)->Arg(100)->Arg(1000);

void BM_CloudForward(benchmark::State& state) {
  const ExperimentConfig config;
  const Detector d = Detector::create(config.cloud_model, 3);
  const ag::Matrix image = random_matrix(config.cloud_model.image_size * config.cloud_model.image_size, 3, 4);
  const ag::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(d.forward(image));
}
BENCHMARK(BM_CloudForward)->Unit(benchmark::kMillisecond);

void BM_AdaptationPair(benchmark::State& state) {
  ExperimentConfig config;
  const CloudModelState s = make_cloud_state(config, Detector::create(config.cloud_model, 5), 5);
  const DomainDataset src = make_dataset(default_source_spec(), DomainRole::source, 0, 1, config.benchmark.scene, "s");
  const DomainDataset tgt = make_dataset(medium_shift_spec(), DomainRole::target, 0, 1, config.benchmark.scene, "t");
  const auto view = training_view(src);
  const ComponentFlags flags{state.range(0) != 0, state.range(0) != 0, state.range(0) != 0};
  const ParameterList params = s.parameters();
  for (auto _ : state) {
    const PairObjective obj = adaptation_pair_objective(s, flags, config, view.front(), tgt.samples.front().image, 1.0);
    ag::backward(obj.source);
    if (obj.target.defined()) ag::backward(obj.target);
    for (const auto& p : params) p.var.zero_grad();
  }
}
BENCHMARK(BM_AdaptationPair)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_GeneratePrompt(benchmark::State& state) {
  Rng rng(6);
  const PromptComponentBank bank = PromptComponentBank::create(8, 64, 0.99, rng);
  const PromptQuery q{ag::Var(random_matrix(1, 64, 7))};
  for (auto _ : state) benchmark::DoNotOptimize(generate_prompt(q, bank));
}
BENCHMARK(BM_GeneratePrompt);

}  // namespace
BENCHMARK_MAIN();
