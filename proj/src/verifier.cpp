#include "deskrl/verifier.hpp"

#include <algorithm>

namespace deskrl::verifier {

namespace {

std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\n' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\n' || s[e - 1] == '\r')) --e;
    return std::string(s.substr(b, e - b));
}

// Splits `lhs = rhs` at top-level '=' (outside braces/parens) and returns the
// right-hand side; predictions often restate the quantity being asked for.
std::optional<std::string> rhs_of_equation(std::string_view s) {
    int depth = 0;
    size_t last_eq = std::string_view::npos;
    for (size_t i = 0; i < s.size(); ++i) {
        char c = s[i];
        if (c == '{' || c == '(' || c == '[') ++depth;
        else if (c == '}' || c == ')' || c == ']') --depth;
        else if (c == '=' && depth == 0) last_eq = i;
    }
    if (last_eq == std::string_view::npos) return std::nullopt;
    return trim(s.substr(last_eq + 1));
}

std::optional<expr::ExprPtr> try_parse(const std::string& text) {
    try {
        return expr::parse_expression(text);
    } catch (const expr::ParseError&) {
    } catch (const expr::UnsupportedCommand&) {
    }
    if (auto rhs = rhs_of_equation(text)) {
        try {
            return expr::parse_expression(*rhs);
        } catch (const expr::ParseError&) {
        } catch (const expr::UnsupportedCommand&) {
        }
    }
    return std::nullopt;
}

}  // namespace

std::vector<std::string> extract_boxed(std::string_view completion, bool* unbalanced) {
    static constexpr std::string_view kMarker = "\\boxed{";
    std::vector<std::string> boxes;
    if (unbalanced) *unbalanced = false;
    size_t pos = 0;
    while (true) {
        size_t at = completion.find(kMarker, pos);
        if (at == std::string_view::npos) break;
        size_t i = at + kMarker.size();
        int depth = 1;
        size_t content_begin = i;
        bool closed = false;
        while (i < completion.size()) {
            char c = completion[i];
            if (c == '\\' && i + 1 < completion.size() &&
                (completion[i + 1] == '{' || completion[i + 1] == '}')) {
                i += 2;
                continue;
            }
            if (c == '{') ++depth;
            else if (c == '}') {
                --depth;
                if (depth == 0) {
                    closed = true;
                    break;
                }
            }
            ++i;
        }
        if (!closed) {
            // This box never terminates; drop it and everything after it.
            if (unbalanced) *unbalanced = true;
            break;
        }
        boxes.push_back(trim(completion.substr(content_begin, i - content_begin)));
        pos = i + 1;
    }
    return boxes;
}

std::vector<std::string> split_answers(std::string_view completion, AnswerProtocol protocol) {
    if (protocol == AnswerProtocol::BoxedText) return extract_boxed(completion);
    std::string body = trim(completion);
    if (body.empty()) return {};
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
        size_t semi = body.find(';', start);
        if (semi == std::string::npos) {
            parts.push_back(trim(std::string_view(body).substr(start)));
            break;
        }
        parts.push_back(trim(std::string_view(body).substr(start, semi - start)));
        start = semi + 1;
    }
    return parts;
}

namespace {

struct VerifyOutcome {
    int r = 0;
    bool judge_consulted = false;
};

VerifyOutcome verify_impl(const std::string& pred, const std::string& gold,
                          const SemanticJudge* judge, const expr::ProbeConfig& probe) {
    expr::ExprPtr gold_ast = expr::parse_expression(gold);
    auto pred_ast = try_parse(pred);
    if (pred_ast) {
        auto verdict = expr::expr_equivalent(*pred_ast, gold_ast, probe);
        if (verdict.verdict == expr::Verdict::Equivalent) return {1, false};
    }
    if (judge) return {judge->judge(pred, gold) ? 1 : 0, true};
    return {0, false};
}

}  // namespace

int verify_answer(const std::string& pred, const std::string& gold,
                  const SemanticJudge* judge, const expr::ProbeConfig& probe) {
    return verify_impl(pred, gold, judge, probe).r;
}

RewardReport grade_trajectory(const std::string& completion,
                              const std::vector<std::string>& golds,
                              const SemanticJudge* judge, AnswerProtocol protocol,
                              const expr::ProbeConfig& probe) {
    RewardReport report;
    report.n_required = static_cast<int>(golds.size());
    std::vector<std::string> boxes = split_answers(completion, protocol);
    report.n_extracted = static_cast<int>(boxes.size());
    report.per_box.resize(golds.size(), 0);
    int total = 0;
    for (size_t i = 0; i < golds.size(); ++i) {
        int r = 0;
        if (i < boxes.size()) {
            VerifyOutcome out = verify_impl(boxes[i], golds[i], judge, probe);
            r = out.r;
            report.judge_used = report.judge_used || out.judge_consulted;
        }
        report.per_box[i] = r;
        total += r;
    }
    report.aggregate = static_cast<double>(total) / static_cast<double>(golds.size());
    return report;
}

}  // namespace deskrl::verifier
