// SPDX-License-Identifier: Apache-2.0
#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ctlab/io.hpp"
#include "json.hpp"

namespace ctlab::io {

using nlohmann::json;

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("missing input file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t file_crc32(const std::filesystem::path& path) { return crc32_of(read_text(path)); }

std::string crc_hex(std::uint32_t crc) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

namespace {

json tokens_json(std::span<const minimath::TokenId> tokens) {
  const auto& vocab = minimath::Vocabulary::instance();
  json out = json::array();
  for (const auto t : tokens) out.push_back(std::string(vocab.token(t)));
  return out;
}

minimath::TokenSeq tokens_from(const json& j) {
  const auto& vocab = minimath::Vocabulary::instance();
  minimath::TokenSeq out;
  for (const auto& item : j) {
    const auto id = vocab.find(item.get<std::string>());
    if (!id) throw FormatError("unknown token in file: " + item.get<std::string>());
    out.push_back(*id);
  }
  return out;
}

template <typename F>
void for_each_line(std::string_view text, F&& f) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = text.find('\n', pos);
    const auto line = text.substr(pos, end == std::string_view::npos ? text.size() - pos : end - pos);
    ++line_no;
    pos = end == std::string_view::npos ? text.size() : end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      f(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::string join_lines(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

json optional_int(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

std::optional<int> optional_int_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<int>();
}

json trajectory_json(const minimath::Trajectory& t) {
  return {{"problem_id", t.problem_id},
          {"tokens", tokens_json(t.tokens)},
          {"correct", t.correct},
          {"predicted_answer", optional_int(t.predicted_answer)}};
}

minimath::Trajectory trajectory_from(const json& j) {
  minimath::Trajectory t;
  t.problem_id = j.at("problem_id").get<std::int64_t>();
  t.tokens = tokens_from(j.at("tokens"));
  t.correct = j.at("correct").get<bool>();
  t.predicted_answer = optional_int_from(j.at("predicted_answer"));
  return t;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string problems_jsonl(std::span<const minimath::Problem> problems) {
  std::vector<json> rows;
  for (const auto& p : problems) {
    json steps = json::array();
    for (const auto& s : p.steps) steps.push_back({std::string(1, static_cast<char>(s.op)), s.operand});
    rows.push_back({{"id", p.id},
                    {"start", p.start},
                    {"steps", steps},
                    {"answer", p.answer},
                    {"prompt_tokens", tokens_json(minimath::render_prompt(p))}});
  }
  return join_lines(rows);
}

std::vector<minimath::Problem> parse_problems(std::string_view text) {
  std::vector<minimath::Problem> out;
  for_each_line(text, [&](const json& j) {
    std::vector<minimath::Step> steps;
    for (const auto& s : j.at("steps")) {
      const auto op = s.at(0).get<std::string>();
      if (op != "+" && op != "-" && op != "*") throw FormatError("unknown operator " + op);
      steps.push_back({static_cast<minimath::Op>(op[0]), s.at(1).get<int>()});
    }
    minimath::Problem p;
    try {
      p = minimath::make_problem(j.at("id").get<std::int64_t>(), j.at("start").get<int>(), steps);
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("invalid problem: ") + e.what());
    }
    if (p.answer != j.at("answer").get<int>()) {
      throw FormatError("problem " + std::to_string(p.id) + ": stored answer disagrees with steps");
    }
    out.push_back(std::move(p));
  });
  return out;
}

std::string trajectories_jsonl(std::span<const minimath::Trajectory> trajectories) {
  std::vector<json> rows;
  for (const auto& t : trajectories) rows.push_back(trajectory_json(t));
  return join_lines(rows);
}

std::vector<minimath::Trajectory> parse_trajectories(std::string_view text) {
  std::vector<minimath::Trajectory> out;
  for_each_line(text, [&](const json& j) { out.push_back(trajectory_from(j)); });
  return out;
}

std::string reports_jsonl(std::span<const rollout::RolloutReport> reports) {
  std::vector<json> rows;
  for (const auto& r : reports) {
    json outcomes = json::array();
    for (const auto& row : r.outcomes) {
      std::string bits;
      for (const auto b : row) bits += b ? '1' : '0';
      outcomes.push_back(bits);
    }
    rows.push_back({{"problem_id", r.problem_id},
                    {"tokens", tokens_json(r.tokens)},
                    {"scores", r.scores},
                    {"critical_position", r.critical_position ? json(*r.critical_position) : json(nullptr)},
                    {"mode", std::string(rollout::mode_name(r.mode))},
                    {"samples", r.samples},
                    {"outcomes", outcomes},
                    {"lengths", r.lengths}});
  }
  return join_lines(rows);
}

std::vector<rollout::RolloutReport> parse_reports(std::string_view text) {
  std::vector<rollout::RolloutReport> out;
  for_each_line(text, [&](const json& j) {
    rollout::RolloutReport r;
    r.problem_id = j.at("problem_id").get<std::int64_t>();
    r.tokens = tokens_from(j.at("tokens"));
    r.scores = j.at("scores").get<std::vector<double>>();
    if (!j.at("critical_position").is_null()) {
      r.critical_position = j.at("critical_position").get<std::size_t>();
    }
    try {
      r.mode = rollout::parse_mode(j.at("mode").get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what());
    }
    r.samples = j.at("samples").get<std::size_t>();
    for (const auto& bits : j.at("outcomes")) {
      std::vector<std::uint8_t> row;
      for (const char c : bits.get<std::string>()) {
        if (c != '0' && c != '1') throw FormatError("outcome records must be 0/1 strings");
        row.push_back(c == '1');
      }
      r.outcomes.push_back(std::move(row));
    }
    r.lengths = j.at("lengths").get<std::vector<std::vector<std::uint32_t>>>();
    out.push_back(std::move(r));
  });
  return out;
}

std::string scores_jsonl(std::span<const contrastive::TokenScoreVector> scores) {
  std::vector<json> rows;
  for (const auto& s : scores) {
    rows.push_back({{"problem_id", s.problem_id},
                    {"tokens", tokens_json(s.tokens)},
                    {"scores", s.scores},
                    {"beta", s.beta}});
  }
  return join_lines(rows);
}

std::vector<contrastive::TokenScoreVector> parse_scores(std::string_view text) {
  std::vector<contrastive::TokenScoreVector> out;
  for_each_line(text, [&](const json& j) {
    contrastive::TokenScoreVector s;
    s.problem_id = j.at("problem_id").get<std::int64_t>();
    s.tokens = tokens_from(j.at("tokens"));
    s.scores = j.at("scores").get<std::vector<double>>();
    s.beta = j.at("beta").get<double>();
    if (s.scores.size() != s.tokens.size()) throw FormatError("score/token length mismatch");
    out.push_back(std::move(s));
  });
  return out;
}

std::string split_json(const contrastive::CorpusSplit& split) {
  json problems = json::array();
  for (const auto& ps : split.problems) {
    json negatives = json::array();
    for (const auto& n : ps.negatives) negatives.push_back(trajectory_json(n));
    json table = json::array();
    for (const auto& g : ps.answer_table) table.push_back({optional_int(g.answer), g.count});
    problems.push_back({{"problem_id", ps.problem_id},
                        {"correct", ps.correct},
                        {"incorrect", ps.incorrect},
                        {"positive", ps.positive ? trajectory_json(*ps.positive) : json(nullptr)},
                        {"negatives", negatives},
                        {"answer_table", table}});
  }
  json out = {{"all_correct", split.all_correct},
              {"all_incorrect", split.all_incorrect},
              {"positives", split.positive_count()},
              {"negatives", split.negative_count()},
              {"problems", problems}};
  return out.dump(1) + "\n";
}

contrastive::CorpusSplit parse_split(std::string_view text) {
  contrastive::CorpusSplit split;
  try {
    const auto j = json::parse(text);
    split.all_correct = j.at("all_correct").get<std::size_t>();
    split.all_incorrect = j.at("all_incorrect").get<std::size_t>();
    for (const auto& p : j.at("problems")) {
      contrastive::ProblemSplit ps;
      ps.problem_id = p.at("problem_id").get<std::int64_t>();
      ps.correct = p.at("correct").get<std::size_t>();
      ps.incorrect = p.at("incorrect").get<std::size_t>();
      if (!p.at("positive").is_null()) ps.positive = trajectory_from(p.at("positive"));
      for (const auto& n : p.at("negatives")) ps.negatives.push_back(trajectory_from(n));
      for (const auto& g : p.at("answer_table")) {
        ps.answer_table.push_back({optional_int_from(g.at(0)), g.at(1).get<std::size_t>()});
      }
      split.problems.push_back(std::move(ps));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("split: ") + e.what());
  }
  return split;
}

std::string curve_csv(const prefopt::TrainingCurve& curve) {
  std::string out = "step,chosen_logp,rejected_logp,loss\n";
  for (const auto& r : curve.records) {
    out += std::to_string(r.step) + ',' + num(r.chosen_logp) + ',' + num(r.rejected_logp) + ',' +
           num(r.loss) + '\n';
  }
  return out;
}

prefopt::TrainingCurve parse_curve_csv(std::string_view text) {
  prefopt::TrainingCurve curve;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "step,chosen_logp,rejected_logp,loss") {
    throw FormatError("curve: unexpected header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    prefopt::CurveRecord r;
    unsigned long long step = 0;
    if (std::sscanf(line.c_str(), "%llu,%lf,%lf,%lf", &step, &r.chosen_logp, &r.rejected_logp,
                    &r.loss) != 4) {
      throw FormatError("curve: malformed row: " + line);
    }
    r.step = static_cast<std::size_t>(step);
    curve.records.push_back(r);
  }
  return curve;
}

std::string passk_csv(const rollout::PassAtKReport& report) {
  std::string out = "k,with_critical,without_critical\n";
  for (std::size_t i = 0; i < report.ks.size(); ++i) {
    out += std::to_string(report.ks[i]) + ',' + num(report.with_critical[i]) + ',' +
           num(report.without_critical[i]) + '\n';
  }
  return out;
}

std::string impact_jsonl(const rollout::PassAtKReport& report) {
  std::vector<json> rows;
  for (const auto& inst : report.instances) {
    rows.push_back({{"problem_id", inst.problem_id},
                    {"critical_position", inst.critical_position},
                    {"mode", std::string(rollout::mode_name(inst.mode))},
                    {"unreplaceable", inst.unreplaceable},
                    {"n", report.n},
                    {"correct_with", inst.correct_with},
                    {"correct_without", inst.correct_without}});
  }
  return join_lines(rows);
}

}  // namespace ctlab::io
