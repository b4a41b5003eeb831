#include "moder/pipeline.hpp"

#include <algorithm>
#include <future>
#include <sstream>

#include "moder/hash.hpp"

namespace moder {

namespace {

constexpr std::uint64_t kTagWorld = 0x574f524cULL;
constexpr std::uint64_t kTagStream = 0x5354524dULL;
constexpr std::uint64_t kTagSplit = 0x53504c54ULL;
constexpr std::uint64_t kTagSynthetic = 0x44535953ULL;
constexpr std::uint64_t kTagHub = 0x48554231ULL;
constexpr std::uint64_t kTagGenerator = 0x47454e52ULL;
constexpr std::uint64_t kTagAlignment = 0x414c474eULL;

std::uint64_t replay_key(const PipelineConfig& cfg, const Scenario& sc) {
  Fnv1a h;
  h.update(sc.encoder->fingerprint());
  h.update(cfg.seed);
  h.update(static_cast<std::uint64_t>(cfg.world.num_classes));
  h.update(static_cast<std::uint64_t>(cfg.world.num_families));
  for (double v : {cfg.world.gamma, cfg.world.delta, cfg.world.sigma}) h.update(&v, sizeof v);
  h.update(static_cast<std::uint64_t>(cfg.stream.protocol));
  for (int v : {cfg.stream.tasks, cfg.stream.classes_per_task, cfg.stream.train_per_class, cfg.stream.test_per_class})
    h.update(static_cast<std::uint64_t>(v));
  const DiffusionConfig& d = cfg.diffusion;
  for (int v : {d.steps, d.hidden, d.layers, d.cond_dim, d.time_dim, d.iterations, d.batch, cfg.synthetic_per_class,
                cfg.synthetic_batch, static_cast<int>(d.scale_to_steps)})
    h.update(static_cast<std::uint64_t>(v));
  for (double v : {d.beta_start, d.beta_end, d.lr, d.weight_decay}) h.update(&v, sizeof v);
  return h.digest();
}

std::vector<CandidateClass> candidates(const Scenario& sc, const std::vector<int>& ids) {
  std::vector<CandidateClass> out;
  for (int c : ids) out.push_back({c, sc.world.at(c).name});
  return out;
}

std::vector<int> difference(std::vector<int> all, std::vector<int> remove) {
  std::sort(all.begin(), all.end());
  std::sort(remove.begin(), remove.end());
  std::vector<int> out;
  std::set_difference(all.begin(), all.end(), remove.begin(), remove.end(), std::back_inserter(out));
  return out;
}

}  // namespace

std::uint64_t PhaseSeeds::generator(int task) const {
  return derive_seed(master, {kTagGenerator, static_cast<std::uint64_t>(task)});
}

std::uint64_t PhaseSeeds::alignment(int task) const {
  return derive_seed(master, {kTagAlignment, static_cast<std::uint64_t>(task)});
}

PhaseSeeds phase_seeds(std::uint64_t master) {
  PhaseSeeds s;
  s.master = master;
  s.world = derive_seed(master, {kTagWorld});
  s.stream = derive_seed(master, {kTagStream});
  s.split = derive_seed(master, {kTagSplit});
  s.synthetic = derive_seed(master, {kTagSynthetic});
  s.hub = derive_seed(master, {kTagHub});
  return s;
}

std::vector<PromptTemplate> pipeline_templates(const PipelineConfig& cfg) {
  if (!cfg.template_file.empty()) return load_templates(cfg.template_file);
  if (cfg.template_count < 1) throw ConfigError("template_count must be at least 1");
  return default_templates(static_cast<std::size_t>(cfg.template_count));
}

Scenario make_scenario(const PipelineConfig& cfg) {
  const PhaseSeeds seeds = phase_seeds(cfg.seed);
  Scenario sc;
  sc.encoder = std::make_shared<const ReferenceEncoder>(cfg.encoder);
  sc.world = generate_world(cfg.world, *sc.encoder, seeds.world);
  sc.stream = make_stream(sc.world, cfg.stream, seeds.stream);
  sc.splits = sample_split(sc.world, sc.stream, seeds.split);
  return sc;
}

TrainedRun train_stream(const PipelineConfig& cfg, ReplayCache* cache, RunLog* log) {
  const PhaseSeeds seeds = phase_seeds(cfg.seed);
  TrainedRun run;
  run.scenario = make_scenario(cfg);
  const Scenario& sc = run.scenario;

  ReplayCache local;
  ReplayCache& replay = cache ? *cache : local;
  const std::uint64_t key = replay_key(cfg, sc);
  if (replay.key != key) replay = ReplayCache{key, {}, {}};

  ExpertSet experts(sc.encoder, pipeline_templates(cfg));
  FoundationalHub hub(sc.encoder, seeds.hub);

  const int T = static_cast<int>(sc.stream.tasks.size());
  for (int t = 0; t < T; ++t) {
    const Task& task = sc.stream.tasks[static_cast<std::size_t>(t)];
    const TaskSplit& split = sc.splits[static_cast<std::size_t>(t)];

    if (static_cast<int>(replay.generators.size()) <= t) {
      std::ostringstream gen_log;
      GeneratorLossLog on_loss;
      if (log) on_loss = [&](int it, double loss) { gen_log << t << ',' << it << ',' << loss << '\n'; };
      replay.generators.push_back(train_generator(split.train, t, cfg.diffusion, seeds.generator(t), on_loss));
      if (log) log->generator_csv += gen_log.str();
    }
    const DiffusionGenerator& gen = replay.generators[static_cast<std::size_t>(t)];
    run.generator_final_loss.push_back(gen.final_loss);
    for (int c : task.class_ids)
      if (!replay.class_samples.count(c))
        replay.class_samples[c] = synthetic_class_samples(gen, c, cfg.synthetic_per_class, cfg.synthetic_batch, seeds.synthetic);

    // D_SYN over every generator so far, in generator order.
    SyntheticDataset dsyn;
    for (int k = 0; k <= t; ++k) {
      dsyn.generator_tasks.push_back(k);
      for (int c : replay.generators[static_cast<std::size_t>(k)].class_ids) {
        for (const auto& x : replay.class_samples.at(c)) dsyn.items.push_back({x, c});
        dsyn.per_class_counts[c] = cfg.synthetic_per_class;
      }
    }
    if (cfg.mix_real_features)
      for (const auto& f : split.train) {
        dsyn.items.push_back(f);
        ++dsyn.per_class_counts[f.class_id];
      }
    shuffle_synthetic(dsyn, seeds.synthetic);

    TrainConfig tc = cfg.train;
    tc.seed = seeds.alignment(t);
    for (int c : task.class_ids) experts.add_expert(c, sc.world.at(c).name, t, tc, seeds.hub);
    const std::vector<int> trainable = tc.retrain_old ? experts.class_ids() : task.class_ids;
    std::ostringstream ta_log;
    ExpertLossLog on_loss;
    if (log) on_loss = [&](int it, int b, double loss) { ta_log << t << ',' << it << ',' << b << ',' << loss << '\n'; };
    train_task_experts(experts, dsyn, tc, trainable, on_loss);
    if (log) log->experts_csv += ta_log.str();

    for (int c : trainable) {
      const Expert& e = experts.at(c);
      if (hub.contains(c))
        hub.update_adapter(c, e.adapter);
      else
        hub.insert(c, e.class_name, e.adapter, e.task_id);
    }
    run.hubs.push_back(hub);
    run.dsyn_training_accuracy.push_back(training_accuracy(experts, dsyn));
  }
  return run;
}

double accuracy(const PrototypeBank& bank, const std::vector<LabeledEmbedding>& test,
                const std::optional<std::vector<int>>& task_classes) {
  if (test.empty()) throw ContractError("accuracy: empty test set");
  std::size_t hits = 0;
  for (const auto& row : test)
    if (classify(bank, row.x, task_classes).top1() == row.class_id) ++hits;
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

AccuracyMatrix evaluate_stream(const TrainedRun& run, const ClassifyConfig& cfg, int threads) {
  const Scenario& sc = run.scenario;
  const int T = static_cast<int>(sc.stream.tasks.size());
  if (static_cast<int>(run.hubs.size()) != T) throw ContractError("evaluate_stream: run is incomplete");
  if (threads < 1) throw ContractError("evaluate_stream: need at least one thread");
  const std::vector<int> all = sc.stream.all_classes();
  AccuracyMatrix a(T);
  auto row = [&](int t) {
    const std::vector<int> seen = sc.stream.seen_through(t);
    const PrototypeBank bank =
        build_prototypes(run.hubs[static_cast<std::size_t>(t)], seen, candidates(sc, difference(all, seen)), cfg);
    for (int i = 0; i < T; ++i) {
      std::optional<std::vector<int>> restrict_to;
      if (sc.protocol() == Protocol::Mtil) restrict_to = sc.stream.tasks[static_cast<std::size_t>(i)].class_ids;
      a.set(t, i, accuracy(bank, sc.splits[static_cast<std::size_t>(i)].test, restrict_to));
    }
  };
  const int workers = std::min(threads, T);
  if (workers == 1) {
    for (int t = 0; t < T; ++t) row(t);
    return a;
  }
  // Rows are independent and each writes only its own entries.
  std::vector<std::future<void>> jobs;
  for (int w = 0; w < workers; ++w)
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (int t = w; t < T; t += workers) row(t);
    }));
  for (auto& j : jobs) j.get();
  return a;
}

AccuracyMatrix evaluate_zero_shot(const Scenario& sc) {
  const int T = static_cast<int>(sc.stream.tasks.size());
  const PrototypeBank bank = zero_shot_prototypes(*sc.encoder, candidates(sc, sc.stream.all_classes()));
  AccuracyMatrix a(T);
  for (int i = 0; i < T; ++i) {
    std::optional<std::vector<int>> restrict_to;
    if (sc.protocol() == Protocol::Mtil) restrict_to = sc.stream.tasks[static_cast<std::size_t>(i)].class_ids;
    const double acc = accuracy(bank, sc.splits[static_cast<std::size_t>(i)].test, restrict_to);
    for (int t = 0; t < T; ++t) a.set(t, i, acc);
  }
  return a;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, ReplayCache* cache, RunLog* log) {
  PipelineResult r;
  r.run = train_stream(cfg, cache, log);
  const bool mtil = r.run.scenario.protocol() == Protocol::Mtil;
  r.accuracy = evaluate_stream(r.run, cfg.classify, cfg.threads);
  r.zero_shot = evaluate_zero_shot(r.run.scenario);
  r.report = make_report(r.accuracy, mtil, cfg.mtil_transfer_inclusive);
  r.zero_shot_report = make_report(r.zero_shot, mtil, cfg.mtil_transfer_inclusive);
  r.report.seeds = r.zero_shot_report.seeds = {cfg.seed};

  const auto& tasks = r.run.scenario.stream.tasks;
  const std::vector<int> all = r.run.scenario.stream.all_classes();
  if (cfg.classify.forge_unseen && cfg.classify.forge.alpha > 0.0 && tasks.size() > 1) {
    const FoundationalHub& first = r.run.hubs.front();
    for (int c : difference(all, tasks.front().class_ids))
      r.merges.push_back(forge(first, r.run.scenario.world.at(c).name, cfg.classify.forge).report);
  }
  return r;
}

}  // namespace moder
