#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

namespace deskrl::expr {

using BigInt = boost::multiprecision::cpp_int;
using BigRational = boost::multiprecision::cpp_rational;

// Node kinds. Integer/Decimal/Negate/Add/Sub/Mul/Div are produced by the
// parser; Rational/Sum/Product appear only in canonical forms. Pow, Call,
// Constant and Variable occur in both.
enum class NodeKind : uint8_t {
    Rational,   // reduced p/q (canonical literal)
    Integer,    // arbitrary-precision integer literal
    Decimal,    // mantissa * 10^exponent, digits kept exactly as written
    Constant,   // named constant
    Variable,   // identifier (latin or greek base, optional subscript/vec)
    Call,       // builtin function application
    Pow,        // base ^ exponent
    Product,    // n-ary canonical product
    Sum,        // n-ary canonical sum
    Negate,     // unary minus (parse form)
    Add,        // binary (parse forms)
    Sub,
    Mul,
    Div,
};

enum class NamedConstant : uint8_t { Pi, Euler };

enum class Builtin : uint8_t { Sin, Cos, Tan, Log, Ln, Exp, Sqrt, Abs };

class Expr;
using ExprPtr = std::shared_ptr<const Expr>;

class Expr {
public:
    NodeKind kind;

    // Literal payloads (only the one matching `kind` is meaningful).
    BigInt int_value;         // Integer
    BigInt mantissa;          // Decimal
    int32_t exponent10 = 0;   // Decimal: value = mantissa * 10^exponent10
    BigRational rational;     // Rational
    NamedConstant constant = NamedConstant::Pi;
    std::string var_base;     // Variable: "m", "\\rho", "P", ...
    std::string var_sub;      // Variable: subscript text ("" if none)
    bool var_vec = false;     // Variable: wrapped in \vec{}
    Builtin func = Builtin::Sin;

    std::vector<ExprPtr> children;

    // Key used for evaluation environments and free-variable sets.
    std::string variable_key() const;
};

ExprPtr make_integer(BigInt v);
ExprPtr make_decimal(BigInt mantissa, int32_t exponent10);
ExprPtr make_rational(BigRational v);
ExprPtr make_constant(NamedConstant c);
ExprPtr make_variable(std::string base, std::string sub = "", bool vec = false);
ExprPtr make_unary(NodeKind kind, ExprPtr child);
ExprPtr make_binary(NodeKind kind, ExprPtr lhs, ExprPtr rhs);
ExprPtr make_nary(NodeKind kind, std::vector<ExprPtr> children);
ExprPtr make_call(Builtin f, ExprPtr arg);

// Total order used for canonical child sorting: node-kind rank first, then
// payload, then recursive comparison of children. Returns <0, 0, >0.
int compare(const ExprPtr& a, const ExprPtr& b);
bool structurally_equal(const ExprPtr& a, const ExprPtr& b);

struct ParseError : std::runtime_error {
    ParseError(std::string msg, size_t offset, std::vector<std::string> expected,
               std::string found);
    size_t offset;
    std::vector<std::string> expected;
    std::string found;
};

struct UnsupportedCommand : std::runtime_error {
    UnsupportedCommand(std::string msg, size_t offset, std::string command);
    size_t offset;
    std::string command;
};

// Parses a LaTeX-subset expression. Implicit multiplication binds between
// adjacent factors, `^` is right-associative, unary minus sits between
// additive and power precedence, and a trailing `\,\mathrm{...}` or
// `\text{...}` unit annotation is stripped before parsing.
ExprPtr parse_expression(std::string_view text);

// Deterministic normal form: exact rational constant folding, Sub/Div/Negate
// rewritten into Sum/Product/Pow form, n-ary flattening, children sorted
// under compare(). Idempotent and total.
ExprPtr canonicalize(const ExprPtr& e);

// Renders an AST back into the grammar. parse(to_latex(parse(s))) is
// structurally identical to parse(s).
std::string to_latex(const ExprPtr& e);

std::set<std::string> free_variables(const ExprPtr& e);

// Extended-precision evaluation; returns NaN/Inf on domain errors or unbound
// variables.
long double evaluate(const ExprPtr& e, const std::map<std::string, long double>& env);

enum class Verdict : uint8_t { Equivalent, NotEquivalent, Indeterminate };
enum class Method : uint8_t { ExactRational, NumericProbe };

struct ProbeConfig {
    int probes = 32;
    int min_valid = 8;
    double rel_tol = 1e-6;
    double abs_tol = 1e-9;
    uint64_t seed = 0x9E3779B97F4A7C15ULL;
};

struct EquivalenceVerdict {
    Verdict verdict = Verdict::Indeterminate;
    Method method = Method::NumericProbe;
    int probe_count = 0;
};

// Canonical-form equality decides exactly; otherwise free variables are
// sampled from [-2,-0.1] U [0.1,2] (variables appearing under log/ln/sqrt
// are drawn from (0.1, 2] only) and both sides are compared probe-wise at
// tolerance abs_tol + rel_tol * max(|a|,|b|).
EquivalenceVerdict expr_equivalent(const ExprPtr& a, const ExprPtr& b,
                                   const ProbeConfig& cfg = {});

}  // namespace deskrl::expr
