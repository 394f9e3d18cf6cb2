#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deskrl/expr.hpp"

namespace deskrl::verifier {

// How a completion encodes its answers: LaTeX \boxed{} spans, or raw token
// text split on ';' for the small-vocabulary task suite.
enum class AnswerProtocol : uint8_t { BoxedText, RawTokens };

// Pluggable semantic judge consulted only when rule-based matching fails.
class SemanticJudge {
public:
    virtual ~SemanticJudge() = default;
    virtual int judge(const std::string& pred, const std::string& gold) const = 0;
};

// Conservative default: never overturns a rule-based failure.
class AlwaysWrongJudge final : public SemanticJudge {
public:
    int judge(const std::string&, const std::string&) const override { return 0; }
};

struct RewardReport {
    std::vector<int> per_box;   // length n_required, entries in {0,1}
    double aggregate = 0.0;     // sum(per_box) / n_required
    int n_required = 0;
    int n_extracted = 0;
    bool judge_used = false;
};

// Returns the contents of every outermost \boxed{...} in document order,
// whitespace-trimmed. An unterminated \boxed{ drops that box and everything
// after it; `unbalanced` (if given) reports that condition.
std::vector<std::string> extract_boxed(std::string_view completion,
                                       bool* unbalanced = nullptr);

// Splits a completion into candidate answers under the given protocol.
std::vector<std::string> split_answers(std::string_view completion, AnswerProtocol protocol);

// Binary per-answer grade: 1 iff the rule-based check proves equivalence,
// otherwise the judge's bit (when provided), otherwise 0. An unparseable
// prediction is a graded-zero path, not an error.
int verify_answer(const std::string& pred, const std::string& gold,
                  const SemanticJudge* judge = nullptr,
                  const expr::ProbeConfig& probe = {});

// Grades extracted answers against golds by position; missing boxes grade 0,
// surplus boxes are ignored.
RewardReport grade_trajectory(const std::string& completion,
                              const std::vector<std::string>& golds,
                              const SemanticJudge* judge = nullptr,
                              AnswerProtocol protocol = AnswerProtocol::BoxedText,
                              const expr::ProbeConfig& probe = {});

}  // namespace deskrl::verifier
