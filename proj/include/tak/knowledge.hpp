#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tak/errors.hpp"

namespace tak {

// One organ class's textual anatomical knowledge: inter-organ relative
// position text and shape/structure text, plus provenance.
struct AnatomicalKnowledgeRecord {
  int class_id = 0;  // >= 1; 0 is background and never carries knowledge
  std::string class_name;
  std::string position_text;
  std::string shape_text;
  std::string source = "generated";  // generated | curated | mock
  bool validated = false;

  bool operator==(const AnatomicalKnowledgeRecord&) const = default;
};

// Minimal chat abstraction over the MLLM endpoint; complete() may throw on
// transport failure.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

// Deterministic offline stand-in: answers validation prompts with yes/no and
// generation prompts with short class-specific paragraphs. Output depends
// only on (seed, prompt).
class MockChatClient : public ChatClient {
 public:
  explicit MockChatClient(uint64_t seed = 0) : seed_(seed) {}
  std::string complete(const std::string& prompt) override;

  // Test knobs: reject claims containing a substring, or fail outright on
  // prompts containing a substring.
  std::string reject_if_contains;
  std::string throw_if_contains;

 private:
  uint64_t seed_;
};

enum class PromptKind { position, shape };

// Prompt construction. The position prompt lists every category to be
// segmented, then appends the template verbatim; the shape prompt is the
// template alone (no trailing period).
std::string build_prompt(const std::string& class_name, PromptKind kind,
                         const std::vector<std::string>& all_class_names);

// The plain-name prompt used by the 'Name' ablation.
std::string name_prompt(const std::string& class_name);

// Yes/no question posed to the validator agent for one claim sentence.
std::string validation_prompt(const std::string& class_name, const std::string& sentence);

// Split a paragraph into claim sentences (terminators . ! ?), trimmed.
std::vector<std::string> split_sentences(const std::string& text);

// Two-agent pipeline: the generator drafts both texts per class, the
// validator answers one yes/no consistency question per sentence; sentences
// judged inconsistent are removed. A record validates only if both residual
// texts are nonempty.
std::vector<AnatomicalKnowledgeRecord> generate_knowledge(
    const std::vector<std::string>& class_names, ChatClient& generator, ChatClient& validator,
    const std::string& source = "generated");

// JSON persistence: {"classes": [record...]} sorted by class_id. Load
// enforces the schema (SchemaError with a JSON-pointer path), unique ids
// (DuplicateClass), and a contiguous 1..K id range.
void save_knowledge(const std::vector<AnatomicalKnowledgeRecord>& records,
                    const std::string& path);
std::vector<AnatomicalKnowledgeRecord> load_knowledge(const std::string& path);

// Serialized form used by both save_knowledge and config hashing.
std::string knowledge_to_json(const std::vector<AnatomicalKnowledgeRecord>& records);

}  // namespace tak
