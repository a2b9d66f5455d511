#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/synth/corpus.hpp"

namespace attncal::synth {

// Dataset files hold one JSON object per line:
//   {"version":1, "id", "kind", "scene":{..., "grid":[[cell object index or -1]]},
//    "query":[ids], "query_text", "answer":[ids], "label":true|false|null,
//    "object", "provenance":{source_scene, object_index, crop_index, origin}}
inline constexpr int kDatasetVersion = 1;

nlohmann::json to_record(const QueryLabelPair& item);
QueryLabelPair from_record(const nlohmann::json& record);

void write_dataset(const std::filesystem::path& path, std::span<const QueryLabelPair> items);
// IoError on unreadable files, malformed lines or an unknown version.
std::vector<QueryLabelPair> read_dataset(const std::filesystem::path& path);

}  // namespace attncal::synth
