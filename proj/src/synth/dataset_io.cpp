#include "attncal/synth/dataset_io.hpp"

#include <fstream>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"

namespace attncal::synth {

nlohmann::json to_record(const QueryLabelPair& item) {
  nlohmann::json j;
  j["version"] = kDatasetVersion;
  j["id"] = item.id;
  j["kind"] = to_string(item.kind);
  j["scene"] = item.scene;
  j["query"] = item.query;
  j["query_text"] = model::detokenize(item.query);
  j["answer"] = item.answer;
  j["label"] = item.label ? nlohmann::json(*item.label) : nlohmann::json(nullptr);
  j["object"] = item.object_type;
  j["provenance"] = {{"source_scene", item.provenance.source_scene},
                     {"object_index", item.provenance.object_index},
                     {"crop_index", item.provenance.crop_index},
                     {"origin", item.provenance.origin}};
  return j;
}

QueryLabelPair from_record(const nlohmann::json& j) {
  try {
    const auto version = j.at("version").get<int>();
    if (version != kDatasetVersion)
      throw IoError("unsupported dataset record version " + std::to_string(version));
    QueryLabelPair q;
    q.id = j.at("id").get<std::uint64_t>();
    q.kind = parse_query_kind(j.at("kind").get<std::string>());
    q.scene = j.at("scene").get<SyntheticScene>();
    q.query = j.at("query").get<std::vector<std::size_t>>();
    q.answer = j.at("answer").get<std::vector<std::size_t>>();
    for (auto t : q.query)
      if (t >= model::tok::kVocabSize) throw IoError("query token id " + std::to_string(t) + " out of range");
    for (auto t : q.answer)
      if (t >= model::tok::kVocabSize) throw IoError("answer token id " + std::to_string(t) + " out of range");
    if (!j.at("label").is_null()) q.label = j.at("label").get<bool>();
    q.object_type = j.at("object").get<std::size_t>();
    const auto& p = j.at("provenance");
    q.provenance = {p.at("source_scene").get<std::uint64_t>(), p.at("object_index").get<std::size_t>(),
                    p.at("crop_index").get<std::size_t>(), p.at("origin").get<std::string>()};
    return q;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed dataset record: ") + e.what());
  }
}

void write_dataset(const std::filesystem::path& path, std::span<const QueryLabelPair> items) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write dataset file " + path.string());
  for (const auto& it : items) f << to_record(it).dump() << '\n';
  if (!f) throw IoError("write failed for " + path.string());
}

std::vector<QueryLabelPair> read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read dataset file " + path.string());
  std::vector<QueryLabelPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(from_record(j));
  }
  return out;
}

}  // namespace attncal::synth
