#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sslc/corpus.hpp"
#include "sslc/eval.hpp"
#include "sslc/toy.hpp"
#include "sslc/trainer.hpp"
#include "sslc/util.hpp"

namespace fs = std::filesystem;
using namespace sslc;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file");
  cmd->add_option("--out", f.out_dir, "output directory")->required();
  cmd->add_option("--seed", f.seed, "seed override");
  cmd->add_option("--steps", f.steps, "step count override");
}

fs::path ensure_out(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

std::vector<corpus::Example> load_if_exists(const fs::path& path, bool labeled) {
  if (!fs::exists(path)) return {};
  return corpus::load_dataset(path.string(), labeled).examples;
}

corpus::DatasetSplit load_split_dir(const fs::path& dir) {
  corpus::DatasetSplit split;
  split.train = load_if_exists(dir / "train.jsonl", true);
  split.test = load_if_exists(dir / "test.jsonl", true);
  split.uda_pool = load_if_exists(dir / "uda.jsonl", false);
  split.contrastive_pool = load_if_exists(dir / "contrastive.jsonl", false);
  return split;
}

corpus::Vocabulary load_vocab(const fs::path& dir) {
  const fs::path p = dir / "vocab.json";
  if (!fs::exists(p)) throw Error("missing vocabulary file " + p.string());
  return corpus::Vocabulary::load(p.string());
}

void check_vocab_hash(const train::TrainState& state,
                      const corpus::Vocabulary& vocab) {
  const std::string h = util::fnv1a_hex(vocab.to_json());
  if (state.vocab_hash != h)
    throw Error("vocabulary mismatch: checkpoint built for hash " +
                state.vocab_hash + ", data directory has " + h);
}

std::vector<corpus::Example> load_labeled_split(const fs::path& dir,
                                                const std::string& split) {
  if (split != "test" && split != "train")
    throw ConfigError("split must be 'test' or 'train'");
  const fs::path p = dir / (split + ".jsonl");
  if (!fs::exists(p)) throw Error("missing dataset file " + p.string());
  return corpus::load_dataset(p.string(), true).examples;
}

struct EncodedSet {
  std::vector<corpus::TokenSeq> seqs;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::vector<std::string> label_names;
};

EncodedSet encode_labeled(const std::vector<corpus::Example>& examples,
                          const corpus::Vocabulary& vocab,
                          const corpus::LabelIndex& index,
                          std::size_t max_len) {
  if (examples.empty()) throw Error("dataset is empty");
  EncodedSet e;
  for (const auto& ex : examples) {
    if (!ex.label) throw Error("unlabeled example in labeled split");
    e.seqs.push_back(corpus::tokenize_encode(ex.text, vocab, max_len));
    e.labels.push_back(static_cast<int>(index.index_of(*ex.label)));
    e.ids.push_back(std::to_string(ex.id));
    e.label_names.push_back(*ex.label);
  }
  return e;
}

int cmd_prepare(const CommonFlags& common, bool synthetic, std::size_t classes,
                const std::string& data_path, const std::string& unlabeled_path,
                const std::string& tokenizer, std::size_t min_freq,
                std::size_t max_vocab) {
  const fs::path out = ensure_out(common.out_dir);
  std::uint64_t seed = common.seed.value_or(1);
  if (!common.config_path.empty() && !common.seed) {
    seed = train::TrainConfig::load(common.config_path).seed;
  }

  corpus::DatasetSplit split;
  std::string lexicon_text;
  if (synthetic) {
    toy::ToyConfig tc;
    tc.classes = classes;
    tc.seed = seed;
    toy::ToyCorpus corpus_data = toy::make_toy_corpus(tc);
    split.train = std::move(corpus_data.train);
    split.test = std::move(corpus_data.test);
    split.uda_pool = corpus_data.unlabeled;
    split.contrastive_pool = std::move(corpus_data.unlabeled);
    lexicon_text = std::move(corpus_data.lexicon_text);
  } else {
    if (data_path.empty())
      throw ConfigError("prepare: either --synthetic or --data is required");
    const auto labeled = corpus::load_dataset(data_path, true);
    std::vector<corpus::Example> unlabeled;
    if (!unlabeled_path.empty())
      unlabeled = corpus::load_dataset(unlabeled_path, false).examples;
    split = corpus::split_dataset(labeled.examples, unlabeled,
                                  corpus::SplitRatios{}, seed);
    if (labeled.skipped > 0)
      std::cerr << "skipped " << labeled.skipped << " empty records\n";
  }

  std::vector<std::string> vocab_texts;
  for (const auto& ex : split.train) vocab_texts.push_back(ex.text);
  for (const auto& ex : split.uda_pool) vocab_texts.push_back(ex.text);
  for (const auto& ex : split.contrastive_pool) vocab_texts.push_back(ex.text);
  const corpus::Vocabulary vocab = corpus::Vocabulary::build(
      vocab_texts, corpus::tokenizer_mode_from_name(tokenizer), min_freq,
      max_vocab);

  corpus::save_dataset((out / "train.jsonl").string(), split.train);
  corpus::save_dataset((out / "test.jsonl").string(), split.test);
  corpus::save_dataset((out / "uda.jsonl").string(), split.uda_pool);
  corpus::save_dataset((out / "contrastive.jsonl").string(),
                       split.contrastive_pool);
  vocab.save((out / "vocab.json").string());
  if (!lexicon_text.empty())
    util::write_file((out / "lexicon.json").string(), lexicon_text);

  std::cout << "prepared " << out.string() << ": train=" << split.train.size()
            << " test=" << split.test.size()
            << " uda=" << split.uda_pool.size()
            << " contrastive=" << split.contrastive_pool.size()
            << " vocab=" << vocab.size() << "\n";
  return 0;
}

int cmd_train(const CommonFlags& common, const std::string& data_dir,
              const std::string& resume_path) {
  if (common.config_path.empty() && resume_path.empty())
    throw ConfigError("train: --config is required");
  const fs::path out = ensure_out(common.out_dir);
  const fs::path data(data_dir.empty() ? common.out_dir : data_dir);

  const corpus::Vocabulary vocab = load_vocab(data);
  const corpus::DatasetSplit split = load_split_dir(data);

  train::TrainState state;
  bool resumed = false;
  if (!resume_path.empty()) {
    if (common.seed)
      throw ConfigError("train: --seed cannot override a resumed checkpoint");
    state = train::load_checkpoint(resume_path);
    resumed = true;
  } else {
    train::TrainConfig cfg = train::TrainConfig::load(common.config_path);
    if (common.seed) cfg.seed = *common.seed;
    if (common.steps) cfg.total_steps = *common.steps;
    std::vector<corpus::Example> labeled = split.train;
    labeled.insert(labeled.end(), split.test.begin(), split.test.end());
    state = train::init_state(cfg, vocab, corpus::LabelIndex::build(labeled));
  }
  if (common.steps) state.config.total_steps = *common.steps;

  std::ofstream history((out / "history.jsonl").string(),
                        resumed ? std::ios::app : std::ios::trunc);
  if (!history) throw Error("cannot open history file");

  train::RunOptions options;
  options.checkpoint_path = (out / "checkpoint.json").string();
  options.history_line = [&](const std::string& line) {
    history << line << "\n";
    history.flush();
  };
  options.log = [](const std::string& msg) { std::cerr << msg << "\n"; };

  util::write_file((out / "config.json").string(), state.config.to_json() + "\n");
  const train::RunResult result = run_training(state, split, vocab, options);

  std::cout << "trained to step " << state.step;
  if (!result.history.empty()) {
    const train::HistoryRow& last = result.history.back();
    std::cout << "  l_total=" << util::format_sig9(last.losses.l_total);
    if (last.eval_accuracy)
      std::cout << "  eval_accuracy=" << util::format_sig9(*last.eval_accuracy);
  }
  std::cout << "  checkpoint=" << options.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& common, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& split_name) {
  const fs::path out = ensure_out(common.out_dir);
  const fs::path data(data_dir.empty() ? common.out_dir : data_dir);
  train::TrainState state = train::load_checkpoint(checkpoint_path);
  const corpus::Vocabulary vocab = load_vocab(data);
  check_vocab_hash(state, vocab);

  const corpus::LabelIndex index =
      corpus::LabelIndex::from_labels(state.class_labels);
  const EncodedSet e = encode_labeled(load_labeled_split(data, split_name),
                                      vocab, index, state.config.max_len);
  const std::vector<int> preds = eval::predict_classes(state.theta, e.seqs);
  const eval::MetricsReport report = eval::classify_metrics(preds, e.labels, index);
  util::write_file((out / "metrics.json").string(), report.to_json(index) + "\n");
  std::cout << report.to_table(index);
  return 0;
}

int cmd_attack_eval(const CommonFlags& common,
                    const std::string& checkpoint_path,
                    const std::string& data_dir, const std::string& defense,
                    double epsilon, std::size_t sample) {
  const fs::path out = ensure_out(common.out_dir);
  const fs::path data(data_dir.empty() ? common.out_dir : data_dir);
  train::TrainState state = train::load_checkpoint(checkpoint_path);
  const corpus::Vocabulary vocab = load_vocab(data);
  check_vocab_hash(state, vocab);

  const corpus::LabelIndex index =
      corpus::LabelIndex::from_labels(state.class_labels);
  const EncodedSet e = encode_labeled(load_labeled_split(data, "test"), vocab,
                                      index, state.config.max_len);

  eval::RobustnessConfig rc;
  if (defense == "auto") {
    // Infer the defense from the training objective.
    const bool adv = state.config.omega_joint > 0.0 &&
                     state.config.alpha_adv > 0.0 &&
                     state.config.attack.method != losses::AttackMethod::None;
    rc.defense = !adv ? eval::Defense::None
                 : state.config.attack.method == losses::AttackMethod::Fgm
                     ? eval::Defense::Fgm
                     : eval::Defense::Pgd;
  } else {
    rc.defense = eval::defense_from_name(defense);
  }
  rc.epsilon = epsilon;
  if (common.steps) rc.steps = static_cast<int>(*common.steps);
  rc.sample = sample;
  rc.seed = common.seed.value_or(1);

  const eval::RobustnessReport report =
      eval::robustness_eval(state.theta, e.seqs, e.labels, rc);
  util::write_file((out / "robustness.json").string(), report.to_json() + "\n");
  std::cout << report.to_table();
  return 0;
}

int cmd_embed_export(const CommonFlags& common,
                     const std::string& checkpoint_path,
                     const std::string& data_dir, const std::string& split_name,
                     bool pca) {
  const fs::path out = ensure_out(common.out_dir);
  const fs::path data(data_dir.empty() ? common.out_dir : data_dir);
  train::TrainState state = train::load_checkpoint(checkpoint_path);
  const corpus::Vocabulary vocab = load_vocab(data);
  check_vocab_hash(state, vocab);

  const corpus::LabelIndex index =
      corpus::LabelIndex::from_labels(state.class_labels);
  const EncodedSet e = encode_labeled(load_labeled_split(data, split_name),
                                      vocab, index, state.config.max_len);

  const fs::path csv = out / "embeddings.csv";
  std::ofstream file(csv.string(), std::ios::trunc);
  if (!file) throw Error("cannot open " + csv.string());
  eval::export_embeddings(state.theta, e.seqs, e.ids, e.label_names, index,
                          pca ? eval::Projector::Pca2 : eval::Projector::None,
                          file);
  std::cout << "wrote " << e.seqs.size() << " rows to " << csv.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semi-supervised text classifier with consistency, adversarial "
               "and contrastive training"};
  app.require_subcommand(1);

  CommonFlags prep_f, train_f, eval_f, attack_f, embed_f;

  CLI::App* prep = app.add_subcommand("prepare", "build splits and vocabulary");
  add_common(prep, prep_f);
  bool synthetic = false;
  std::size_t classes = 6;
  std::string data_path, unlabeled_path, tokenizer = "word";
  std::size_t min_freq = 1, max_vocab = 50000;
  prep->add_flag("--synthetic", synthetic, "generate the bundled toy corpus");
  prep->add_option("--classes", classes, "toy corpus class count (3-10)");
  prep->add_option("--data", data_path, "labeled JSONL input");
  prep->add_option("--unlabeled", unlabeled_path, "unlabeled JSONL input");
  prep->add_option("--tokenizer", tokenizer, "word|char");
  prep->add_option("--min-freq", min_freq, "minimum token frequency");
  prep->add_option("--max-vocab", max_vocab, "vocabulary size cap");

  CLI::App* trn = app.add_subcommand("train", "run the training loop");
  add_common(trn, train_f);
  std::string train_data, resume_path;
  trn->add_option("--data", train_data, "prepared data directory");
  trn->add_option("--resume", resume_path, "checkpoint to resume from");

  CLI::App* evl = app.add_subcommand("eval", "classification metrics");
  add_common(evl, eval_f);
  std::string eval_ckpt, eval_data, eval_split = "test";
  evl->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  evl->add_option("--data", eval_data, "prepared data directory");
  evl->add_option("--split", eval_split, "test|train");

  CLI::App* atk = app.add_subcommand("attack-eval", "SA/RA robustness report");
  add_common(atk, attack_f);
  std::string atk_ckpt, atk_data, defense = "auto";
  double epsilon = 2.57e-3;
  std::size_t sample = 1000;
  atk->add_option("--checkpoint", atk_ckpt, "trained checkpoint")->required();
  atk->add_option("--data", atk_data, "prepared data directory");
  atk->add_option("--defense", defense, "auto|none|fgm|pgd");
  atk->add_option("--eps", epsilon, "attack radius");
  atk->add_option("--sample", sample, "test examples to attack (0 = all)");

  CLI::App* emb = app.add_subcommand("embed-export", "logit CSV export");
  add_common(emb, embed_f);
  std::string emb_ckpt, emb_data, emb_split = "test";
  bool pca = false;
  emb->add_option("--checkpoint", emb_ckpt, "trained checkpoint")->required();
  emb->add_option("--data", emb_data, "prepared data directory");
  emb->add_option("--split", emb_split, "test|train");
  emb->add_flag("--pca", pca, "append 2-d PCA coordinates");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(prep))
      return cmd_prepare(prep_f, synthetic, classes, data_path, unlabeled_path,
                         tokenizer, min_freq, max_vocab);
    if (app.got_subcommand(trn)) return cmd_train(train_f, train_data, resume_path);
    if (app.got_subcommand(evl))
      return cmd_eval(eval_f, eval_ckpt, eval_data, eval_split);
    if (app.got_subcommand(atk))
      return cmd_attack_eval(attack_f, atk_ckpt, atk_data, defense, epsilon,
                             sample);
    if (app.got_subcommand(emb))
      return cmd_embed_export(embed_f, emb_ckpt, emb_data, emb_split, pca);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
