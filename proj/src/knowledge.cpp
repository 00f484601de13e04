#include "tak/knowledge.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "tak/rng.hpp"

namespace tak {

using nlohmann::json;

namespace {

// Templates quoted verbatim; [CLS] is substituted with the class name. Note
// the shape template carries no trailing period.
constexpr const char* kPositionTemplate =
    "Describe the relative positional relationship of [CLS] with other organs.";
constexpr const char* kShapeTemplate = "Describe the shape and structure of [CLS]";
constexpr const char* kNameTemplate =
    "A computerized tomography scan of the human abdomen includes the [CLS]";

std::string substitute(const std::string& tmpl, const std::string& cls) {
  std::string out = tmpl;
  const std::string tag = "[CLS]";
  const size_t at = out.find(tag);
  out.replace(at, tag.size(), cls);
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\n\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\n\r");
  return s.substr(a, b - a + 1);
}

bool first_word_is_no(const std::string& response) {
  const std::string t = trim(response);
  if (t.size() < 2) return false;
  const char a = static_cast<char>(std::tolower(static_cast<unsigned char>(t[0])));
  const char b = static_cast<char>(std::tolower(static_cast<unsigned char>(t[1])));
  if (a != 'n' || b != 'o') return false;
  return t.size() == 2 || !std::isalpha(static_cast<unsigned char>(t[2]));
}

// Pull the class name back out of a generation prompt; the mock client is a
// protocol-aware test double, so matching the known templates is acceptable.
std::string extract_class(const std::string& prompt, const std::string& head,
                          const std::string& tail) {
  const size_t h = prompt.rfind(head);
  if (h == std::string::npos) return "";
  const size_t start = h + head.size();
  size_t end;
  if (tail.empty()) {
    end = prompt.size();
  } else {
    end = prompt.find(tail, start);
    if (end == std::string::npos) return "";
  }
  return prompt.substr(start, end - start);
}

}  // namespace

std::string MockChatClient::complete(const std::string& prompt) {
  if (!throw_if_contains.empty() && prompt.find(throw_if_contains) != std::string::npos)
    throw std::runtime_error("mock transport failure");

  if (prompt.find("Answer yes or no.") != std::string::npos) {
    if (!reject_if_contains.empty() && prompt.find(reject_if_contains) != std::string::npos)
      return "no";
    return "yes";
  }

  Rng rng(seed_ ^ fnv1a64(prompt));
  std::string cls = extract_class(prompt, "relative positional relationship of ",
                                  " with other organs.");
  if (!cls.empty()) {
    static const char* kNeighbors[] = {"near the midline of the abdomen",
                                       "adjacent to its neighboring organs",
                                       "within the upper abdominal cavity"};
    static const char* kAxes[] = {"anterior to the spine", "inferior to the diaphragm",
                                  "posterior to the abdominal wall"};
    std::ostringstream out;
    out << "The " << cls << " lies " << kNeighbors[rng.uniform_index(3)] << ". ";
    out << "Relative to surrounding structures, the " << cls << " is "
        << kAxes[rng.uniform_index(3)] << ". ";
    out << "Across subjects the position of the " << cls << " is consistent.";
    return out.str();
  }
  cls = extract_class(prompt, "shape and structure of ", "");
  if (!cls.empty()) {
    static const char* kForms[] = {"a compact rounded form", "an elongated tubular form",
                                   "a lobulated wedge-like form"};
    static const char* kSurfaces[] = {"smooth", "gently undulating", "sharply demarcated"};
    std::ostringstream out;
    out << "The " << cls << " has " << kForms[rng.uniform_index(3)] << ". ";
    out << "Its external contour is " << kSurfaces[rng.uniform_index(3)] << ". ";
    out << "Internally the " << cls << " appears largely homogeneous.";
    return out.str();
  }
  return "Unrecognized request.";
}

std::string build_prompt(const std::string& class_name, PromptKind kind,
                         const std::vector<std::string>& all_class_names) {
  if (std::find(all_class_names.begin(), all_class_names.end(), class_name) ==
      all_class_names.end())
    throw UnknownClass("class '" + class_name + "' is not among the categories to segment");
  if (kind == PromptKind::shape) return substitute(kShapeTemplate, class_name);
  std::ostringstream out;
  out << "The categories to be segmented are: ";
  for (size_t i = 0; i < all_class_names.size(); ++i) {
    if (i) out << ", ";
    out << all_class_names[i];
  }
  out << ".\n" << substitute(kPositionTemplate, class_name);
  return out.str();
}

std::string name_prompt(const std::string& class_name) {
  return substitute(kNameTemplate, class_name);
}

std::string validation_prompt(const std::string& class_name, const std::string& sentence) {
  return "Claim about " + class_name + ": \"" + sentence +
         "\" Is this claim anatomically consistent? Answer yes or no.";
}

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    cur += c;
    if (c == '.' || c == '!' || c == '?') {
      const std::string t = trim(cur);
      if (!t.empty()) out.push_back(t);
      cur.clear();
    }
  }
  const std::string t = trim(cur);
  if (!t.empty()) out.push_back(t);
  return out;
}

namespace {

// Drafts one text, filters it sentence-by-sentence through the validator,
// returns the surviving sentences joined with single spaces.
std::string generate_filtered(const std::string& class_name, const std::string& prompt,
                              ChatClient& generator, ChatClient& validator) {
  std::string draft;
  try {
    draft = generator.complete(prompt);
  } catch (const std::exception& e) {
    throw GenerationFailed(class_name, e.what());
  }
  std::string kept;
  for (const std::string& sentence : split_sentences(draft)) {
    std::string verdict;
    try {
      verdict = validator.complete(validation_prompt(class_name, sentence));
    } catch (const std::exception& e) {
      throw GenerationFailed(class_name, e.what());
    }
    if (first_word_is_no(verdict)) continue;
    if (!kept.empty()) kept += ' ';
    kept += sentence;
  }
  return kept;
}

}  // namespace

std::vector<AnatomicalKnowledgeRecord> generate_knowledge(
    const std::vector<std::string>& class_names, ChatClient& generator, ChatClient& validator,
    const std::string& source) {
  if (class_names.empty()) throw ConfigError("generate_knowledge: no class names");
  std::vector<AnatomicalKnowledgeRecord> out;
  int next_id = 1;
  for (const std::string& name : class_names) {
    AnatomicalKnowledgeRecord rec;
    rec.class_id = next_id++;
    rec.class_name = name;
    rec.position_text = generate_filtered(
        name, build_prompt(name, PromptKind::position, class_names), generator, validator);
    rec.shape_text = generate_filtered(name, build_prompt(name, PromptKind::shape, class_names),
                                       generator, validator);
    if (rec.position_text.empty() || rec.shape_text.empty()) throw ValidationRejected(name);
    rec.source = source;
    rec.validated = true;
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

const char* require_string(const json& rec, const char* key, const std::string& pointer) {
  if (!rec.contains(key) || !rec[key].is_string())
    throw SchemaError(pointer + "/" + key, "missing or not a string");
  return key;
}

}  // namespace

std::string knowledge_to_json(const std::vector<AnatomicalKnowledgeRecord>& records) {
  std::vector<AnatomicalKnowledgeRecord> sorted = records;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  json arr = json::array();
  for (const auto& r : sorted) {
    json o;
    o["class_id"] = r.class_id;
    o["class_name"] = r.class_name;
    o["position_text"] = r.position_text;
    o["shape_text"] = r.shape_text;
    o["source"] = r.source;
    o["validated"] = r.validated;
    arr.push_back(o);
  }
  json top;
  top["classes"] = arr;
  return top.dump(2) + "\n";
}

void save_knowledge(const std::vector<AnatomicalKnowledgeRecord>& records,
                    const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f << knowledge_to_json(records);
  if (!f) throw DataError("write failed for '" + path + "'");
}

std::vector<AnatomicalKnowledgeRecord> load_knowledge(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open knowledge file '" + path + "'");
  json top;
  try {
    top = json::parse(f);
  } catch (const json::exception& e) {
    throw SchemaError("/", std::string("invalid JSON: ") + e.what());
  }
  if (!top.is_object() || !top.contains("classes") || !top["classes"].is_array())
    throw SchemaError("/classes", "missing or not an array");

  std::vector<AnatomicalKnowledgeRecord> out;
  std::vector<int> seen_ids;
  const json& arr = top["classes"];
  for (size_t i = 0; i < arr.size(); ++i) {
    const std::string ptr = "/classes/" + std::to_string(i);
    const json& rec = arr[i];
    if (!rec.is_object()) throw SchemaError(ptr, "not an object");
    if (!rec.contains("class_id") || !rec["class_id"].is_number_integer())
      throw SchemaError(ptr + "/class_id", "missing or not an integer");
    AnatomicalKnowledgeRecord r;
    r.class_id = rec["class_id"].get<int>();
    if (r.class_id < 1) throw SchemaError(ptr + "/class_id", "must be >= 1");
    r.class_name = rec[require_string(rec, "class_name", ptr)].get<std::string>();
    if (r.class_name.empty()) throw SchemaError(ptr + "/class_name", "must be nonempty");
    r.position_text = rec[require_string(rec, "position_text", ptr)].get<std::string>();
    r.shape_text = rec[require_string(rec, "shape_text", ptr)].get<std::string>();
    r.source = rec[require_string(rec, "source", ptr)].get<std::string>();
    if (r.source != "generated" && r.source != "curated" && r.source != "mock")
      throw SchemaError(ptr + "/source", "must be one of generated|curated|mock");
    if (!rec.contains("validated") || !rec["validated"].is_boolean())
      throw SchemaError(ptr + "/validated", "missing or not a boolean");
    r.validated = rec["validated"].get<bool>();
    if (r.validated && (r.position_text.empty() || r.shape_text.empty()))
      throw SchemaError(ptr, "validated record must carry nonempty texts");
    if (std::find(seen_ids.begin(), seen_ids.end(), r.class_id) != seen_ids.end())
      throw DuplicateClass(r.class_id);
    seen_ids.push_back(r.class_id);
    out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  for (size_t i = 0; i < out.size(); ++i)
    if (out[i].class_id != static_cast<int>(i) + 1)
      throw SchemaError("/classes", "class ids must cover 1..K contiguously");
  return out;
}

}  // namespace tak
