#include "knnstore/query.hpp"

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "knnstore/error.hpp"

namespace knnstore {

std::vector<LabeledQuery> read_queries_jsonl(const std::filesystem::path& path,
                                             std::uint32_t dim) {
  std::ifstream in(path);
  if (!in) {
    raise(ErrorCode::IoError, "cannot open for reading: " + path.string());
  }
  std::vector<LabeledQuery> queries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::ParseError,
            "line " + std::to_string(line_no) + ": " + e.what());
    }
    LabeledQuery q;
    try {
      auto it = obj.find("query");
      if (it == obj.end() || !it->is_array()) {
        raise(ErrorCode::ParseError,
              "line " + std::to_string(line_no) +
                  ": missing or non-array field \"query\"");
      }
      q.key = it->get<std::vector<float>>();
      if (auto g = obj.find("gold"); g != obj.end() && !g->is_null()) {
        q.gold = g->get<std::uint32_t>();
      }
      if (auto b = obj.find("base_dist"); b != obj.end() && !b->is_null()) {
        q.base_dist = b->get<std::vector<double>>();
      }
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::ParseError,
            "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (q.key.size() != dim) {
      raise(ErrorCode::DimensionMismatch,
            "line " + std::to_string(line_no) + ": query length " +
                std::to_string(q.key.size()) + " != dim " +
                std::to_string(dim));
    }
    queries.push_back(std::move(q));
  }
  return queries;
}

void write_queries_jsonl(const std::filesystem::path& path,
                         const std::vector<LabeledQuery>& queries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    raise(ErrorCode::IoError, "cannot open for writing: " + path.string());
  }
  for (const auto& q : queries) {
    nlohmann::json obj;
    obj["query"] = q.key;
    if (q.gold) {
      obj["gold"] = *q.gold;
    }
    if (!q.base_dist.empty()) {
      obj["base_dist"] = q.base_dist;
    }
    out << obj.dump() << '\n';
  }
  if (!out) {
    raise(ErrorCode::IoError, "write failed: " + path.string());
  }
}

}  // namespace knnstore
