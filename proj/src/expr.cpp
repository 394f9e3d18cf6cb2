#include "deskrl/expr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "deskrl/rng.hpp"

namespace deskrl::expr {

namespace {

std::shared_ptr<Expr> blank(NodeKind k) {
    auto e = std::make_shared<Expr>();
    e->kind = k;
    return e;
}

}  // namespace

std::string Expr::variable_key() const {
    std::string key = var_base;
    if (!var_sub.empty()) {
        key += "_";
        key += var_sub;
    }
    if (var_vec) key = "vec(" + key + ")";
    return key;
}

ExprPtr make_integer(BigInt v) {
    auto e = blank(NodeKind::Integer);
    e->int_value = std::move(v);
    return e;
}

ExprPtr make_decimal(BigInt mantissa, int32_t exponent10) {
    auto e = blank(NodeKind::Decimal);
    e->mantissa = std::move(mantissa);
    e->exponent10 = exponent10;
    return e;
}

ExprPtr make_rational(BigRational v) {
    auto e = blank(NodeKind::Rational);
    e->rational = std::move(v);
    return e;
}

ExprPtr make_constant(NamedConstant c) {
    auto e = blank(NodeKind::Constant);
    e->constant = c;
    return e;
}

ExprPtr make_variable(std::string base, std::string sub, bool vec) {
    auto e = blank(NodeKind::Variable);
    e->var_base = std::move(base);
    e->var_sub = std::move(sub);
    e->var_vec = vec;
    return e;
}

ExprPtr make_unary(NodeKind kind, ExprPtr child) {
    auto e = blank(kind);
    e->children.push_back(std::move(child));
    return e;
}

ExprPtr make_binary(NodeKind kind, ExprPtr lhs, ExprPtr rhs) {
    auto e = blank(kind);
    e->children.push_back(std::move(lhs));
    e->children.push_back(std::move(rhs));
    return e;
}

ExprPtr make_nary(NodeKind kind, std::vector<ExprPtr> children) {
    auto e = blank(kind);
    e->children = std::move(children);
    return e;
}

ExprPtr make_call(Builtin f, ExprPtr arg) {
    auto e = blank(NodeKind::Call);
    e->func = f;
    e->children.push_back(std::move(arg));
    return e;
}

// ---------------------------------------------------------------------------
// Ordering
// ---------------------------------------------------------------------------

namespace {

int kind_rank(NodeKind k) {
    switch (k) {
        case NodeKind::Rational: return 0;
        case NodeKind::Integer: return 1;
        case NodeKind::Decimal: return 2;
        case NodeKind::Constant: return 3;
        case NodeKind::Variable: return 4;
        case NodeKind::Call: return 5;
        case NodeKind::Pow: return 6;
        case NodeKind::Product: return 7;
        case NodeKind::Sum: return 8;
        case NodeKind::Negate: return 9;
        case NodeKind::Add: return 10;
        case NodeKind::Sub: return 11;
        case NodeKind::Mul: return 12;
        case NodeKind::Div: return 13;
    }
    return 14;
}

template <typename T>
int cmp3(const T& a, const T& b) {
    if (a < b) return -1;
    if (b < a) return 1;
    return 0;
}

}  // namespace

int compare(const ExprPtr& a, const ExprPtr& b) {
    if (a.get() == b.get()) return 0;
    if (int c = cmp3(kind_rank(a->kind), kind_rank(b->kind))) return c;
    switch (a->kind) {
        case NodeKind::Rational:
            if (int c = cmp3(a->rational, b->rational)) return c;
            break;
        case NodeKind::Integer:
            if (int c = cmp3(a->int_value, b->int_value)) return c;
            break;
        case NodeKind::Decimal:
            if (int c = cmp3(a->mantissa, b->mantissa)) return c;
            if (int c = cmp3(a->exponent10, b->exponent10)) return c;
            break;
        case NodeKind::Constant:
            if (int c = cmp3(static_cast<int>(a->constant), static_cast<int>(b->constant))) return c;
            break;
        case NodeKind::Variable:
            if (int c = a->var_base.compare(b->var_base)) return c < 0 ? -1 : 1;
            if (int c = a->var_sub.compare(b->var_sub)) return c < 0 ? -1 : 1;
            if (int c = cmp3(a->var_vec, b->var_vec)) return c;
            break;
        case NodeKind::Call:
            if (int c = cmp3(static_cast<int>(a->func), static_cast<int>(b->func))) return c;
            break;
        default:
            break;
    }
    if (int c = cmp3(a->children.size(), b->children.size())) return c;
    for (size_t i = 0; i < a->children.size(); ++i) {
        if (int c = compare(a->children[i], b->children[i])) return c;
    }
    return 0;
}

bool structurally_equal(const ExprPtr& a, const ExprPtr& b) {
    return compare(a, b) == 0;
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

namespace {

enum class Tok : uint8_t {
    Number, Plus, Minus, Star, Slash, Caret, Underscore,
    LParen, RParen, LBrace, RBrace, Pipe, Letter, Command, End,
};

struct Token {
    Tok kind;
    size_t offset;
    std::string text;     // digits for Number, char for Letter, name for Command
    bool is_decimal = false;
    BigInt mantissa;      // Number payload
    int32_t exponent10 = 0;
};

const char* tok_name(Tok t) {
    switch (t) {
        case Tok::Number: return "number";
        case Tok::Plus: return "'+'";
        case Tok::Minus: return "'-'";
        case Tok::Star: return "'*'";
        case Tok::Slash: return "'/'";
        case Tok::Caret: return "'^'";
        case Tok::Underscore: return "'_'";
        case Tok::LParen: return "'('";
        case Tok::RParen: return "')'";
        case Tok::LBrace: return "'{'";
        case Tok::RBrace: return "'}'";
        case Tok::Pipe: return "'|'";
        case Tok::Letter: return "letter";
        case Tok::Command: return "command";
        case Tok::End: return "end of input";
    }
    return "?";
}

const std::set<std::string>& greek_commands() {
    static const std::set<std::string> names = {
        "alpha", "beta", "gamma", "delta", "epsilon", "varepsilon", "zeta",
        "eta", "theta", "vartheta", "iota", "kappa", "lambda", "mu", "nu",
        "xi", "omicron", "rho", "varrho", "sigma", "tau", "upsilon", "phi",
        "varphi", "chi", "psi", "omega", "Gamma", "Delta", "Theta", "Lambda",
        "Xi", "Sigma", "Upsilon", "Phi", "Psi", "Omega", "ell", "hbar",
    };
    return names;
}

bool is_function_command(const std::string& name, Builtin* out) {
    static const std::map<std::string, Builtin> table = {
        {"sin", Builtin::Sin}, {"cos", Builtin::Cos}, {"tan", Builtin::Tan},
        {"log", Builtin::Log}, {"ln", Builtin::Ln},   {"exp", Builtin::Exp},
        {"sqrt", Builtin::Sqrt}, {"abs", Builtin::Abs},
    };
    auto it = table.find(name);
    if (it == table.end()) return false;
    if (out) *out = it->second;
    return true;
}

struct Lexer {
    std::string_view text;
    size_t pos = 0;
    std::vector<Token> tokens;

    [[noreturn]] void fail(size_t offset, std::vector<std::string> expected, std::string found) {
        std::ostringstream msg;
        msg << "parse error at byte " << offset << ": found " << found << ", expected ";
        for (size_t i = 0; i < expected.size(); ++i) {
            if (i) msg << " | ";
            msg << expected[i];
        }
        throw ParseError(msg.str(), offset, std::move(expected), std::move(found));
    }

    bool starts_with(const char* s) const {
        return text.substr(pos, std::string_view(s).size()) == s;
    }

    void push(Tok k, size_t off, std::string t = "") {
        Token tok;
        tok.kind = k;
        tok.offset = off;
        tok.text = std::move(t);
        tokens.push_back(std::move(tok));
    }

    void run() {
        while (pos < text.size()) {
            size_t off = pos;
            char c = text[pos];
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '~' || c == '$') {
                ++pos;
                continue;
            }
            // Unicode operators used in typeset math.
            if (starts_with("\xe2\x88\x92")) { push(Tok::Minus, off); pos += 3; continue; }  // −
            if (starts_with("\xc3\x97")) { push(Tok::Star, off); pos += 2; continue; }       // ×
            if (starts_with("\xc2\xb7")) { push(Tok::Star, off); pos += 2; continue; }       // ·
            if (starts_with("\xc3\xb7")) { push(Tok::Slash, off); pos += 2; continue; }      // ÷
            if (starts_with("\xcf\x80")) { push(Tok::Command, off, "pi"); pos += 2; continue; }  // π
            if (c == '+') { push(Tok::Plus, off); ++pos; continue; }
            if (c == '-') { push(Tok::Minus, off); ++pos; continue; }
            if (c == '*') { push(Tok::Star, off); ++pos; continue; }
            if (c == '/') { push(Tok::Slash, off); ++pos; continue; }
            if (c == '^') { push(Tok::Caret, off); ++pos; continue; }
            if (c == '_') { push(Tok::Underscore, off); ++pos; continue; }
            if (c == '(' || c == '[') { push(Tok::LParen, off); ++pos; continue; }
            if (c == ')' || c == ']') { push(Tok::RParen, off); ++pos; continue; }
            if (c == '{') { push(Tok::LBrace, off); ++pos; continue; }
            if (c == '}') { push(Tok::RBrace, off); ++pos; continue; }
            if (c == '|') { push(Tok::Pipe, off); ++pos; continue; }
            if ((c >= '0' && c <= '9') || c == '.') {
                lex_number(off);
                continue;
            }
            if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) {
                push(Tok::Letter, off, std::string(1, c));
                ++pos;
                continue;
            }
            if (c == '\\') {
                lex_command(off);
                continue;
            }
            fail(off, {"number", "variable", "operator"}, "'" + std::string(1, c) + "'");
        }
        push(Tok::End, text.size());
    }

    void lex_number(size_t off) {
        std::string digits;
        while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') digits += text[pos++];
        bool is_decimal = false;
        int32_t exponent10 = 0;
        if (pos < text.size() && text[pos] == '.') {
            size_t dot = pos;
            ++pos;
            std::string frac;
            while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') frac += text[pos++];
            if (frac.empty()) fail(dot + 1, {"digit"}, "'.'");
            is_decimal = true;
            exponent10 = -static_cast<int32_t>(frac.size());
            digits += frac;
        }
        Token tok;
        tok.kind = Tok::Number;
        tok.offset = off;
        tok.is_decimal = is_decimal;
        tok.mantissa = BigInt(digits.empty() ? "0" : digits);
        tok.exponent10 = exponent10;
        tok.text = digits;
        tokens.push_back(std::move(tok));
    }

    void lex_command(size_t off) {
        ++pos;  // backslash
        if (pos < text.size() && !isalpha(static_cast<unsigned char>(text[pos]))) {
            // Spacing commands \, \; \! \  and escaped braces.
            char c = text[pos];
            if (c == ',' || c == ';' || c == '!' || c == ' ') { ++pos; return; }
            if (c == '{') { push(Tok::LBrace, off); ++pos; return; }
            if (c == '}') { push(Tok::RBrace, off); ++pos; return; }
            fail(off, {"command name"}, "'\\" + std::string(1, c) + "'");
        }
        std::string name;
        while (pos < text.size() && isalpha(static_cast<unsigned char>(text[pos]))) name += text[pos++];
        if (name == "left" || name == "right" || name == "quad" || name == "qquad" ||
            name == "displaystyle" || name == "rm" || name == "mathrm" || name == "text") {
            // \left / \right are grouping hints; font wrappers are handled by
            // the parser where legal and rejected elsewhere.
            if (name == "left" || name == "right" || name == "quad" || name == "qquad" ||
                name == "displaystyle" || name == "rm") {
                return;
            }
        }
        if (name == "cdot" || name == "times") { push(Tok::Star, off); return; }
        if (name == "div") { push(Tok::Slash, off); return; }
        push(Tok::Command, off, name);
    }
};

// ---------------------------------------------------------------------------
// Parser (recursive descent)
// ---------------------------------------------------------------------------

struct Parser {
    const std::vector<Token>& toks;
    size_t pos = 0;

    explicit Parser(const std::vector<Token>& t) : toks(t) {}

    const Token& peek(size_t ahead = 0) const {
        size_t i = pos + ahead;
        if (i >= toks.size()) i = toks.size() - 1;
        return toks[i];
    }

    const Token& advance() { return toks[pos < toks.size() - 1 ? pos++ : pos]; }

    [[noreturn]] void fail(const Token& at, std::vector<std::string> expected) {
        std::string found =
            at.kind == Tok::Command ? "'\\" + at.text + "'"
            : at.kind == Tok::Letter ? "'" + at.text + "'"
            : at.kind == Tok::Number ? "number '" + at.text + "'"
                                     : std::string(tok_name(at.kind));
        std::ostringstream msg;
        msg << "parse error at byte " << at.offset << ": found " << found << ", expected ";
        for (size_t i = 0; i < expected.size(); ++i) {
            if (i) msg << " | ";
            msg << expected[i];
        }
        throw ParseError(msg.str(), at.offset, std::move(expected), std::move(found));
    }

    void expect(Tok k) {
        if (peek().kind != k) fail(peek(), {tok_name(k)});
        advance();
    }

    bool starts_atom(const Token& t) const {
        switch (t.kind) {
            case Tok::Number:
            case Tok::Letter:
            case Tok::LParen:
            case Tok::LBrace:
                return true;
            case Tok::Command: {
                if (t.text == "pi" || t.text == "frac" || t.text == "vec") return true;
                if (greek_commands().count(t.text)) return true;
                if (is_function_command(t.text, nullptr)) return true;
                return false;
            }
            default:
                return false;
        }
    }

    ExprPtr parse_sum() {
        ExprPtr lhs = parse_product();
        while (true) {
            Tok k = peek().kind;
            if (k == Tok::Plus) {
                advance();
                lhs = make_binary(NodeKind::Add, lhs, parse_product());
            } else if (k == Tok::Minus) {
                advance();
                lhs = make_binary(NodeKind::Sub, lhs, parse_product());
            } else {
                return lhs;
            }
        }
    }

    ExprPtr parse_product() {
        ExprPtr lhs = parse_unary();
        while (true) {
            const Token& t = peek();
            if (t.kind == Tok::Star) {
                advance();
                lhs = make_binary(NodeKind::Mul, lhs, parse_unary());
            } else if (t.kind == Tok::Slash) {
                advance();
                lhs = make_binary(NodeKind::Div, lhs, parse_unary());
            } else if (starts_atom(t)) {
                lhs = make_binary(NodeKind::Mul, lhs, parse_power());
            } else {
                return lhs;
            }
        }
    }

    ExprPtr parse_unary() {
        if (peek().kind == Tok::Minus) {
            advance();
            return make_unary(NodeKind::Negate, parse_unary());
        }
        if (peek().kind == Tok::Plus) {
            advance();
            return parse_unary();
        }
        return parse_power();
    }

    ExprPtr parse_power() {
        ExprPtr base = parse_atom();
        if (peek().kind == Tok::Caret) {
            advance();
            return make_binary(NodeKind::Pow, base, parse_exponent());
        }
        return base;
    }

    // Exponents allow a sign and recurse right-associatively.
    ExprPtr parse_exponent() {
        if (peek().kind == Tok::Minus) {
            advance();
            return make_unary(NodeKind::Negate, parse_exponent());
        }
        return parse_power();
    }

    ExprPtr parse_braced() {
        expect(Tok::LBrace);
        ExprPtr inner = parse_sum();
        expect(Tok::RBrace);
        return inner;
    }

    ExprPtr parse_paren() {
        expect(Tok::LParen);
        ExprPtr inner = parse_sum();
        expect(Tok::RParen);
        return inner;
    }

    // Argument of \frac: a braced group or a single digit/letter token.
    ExprPtr parse_frac_arg() {
        const Token& t = peek();
        if (t.kind == Tok::LBrace) return parse_braced();
        if (t.kind == Tok::Number) {
            advance();
            if (t.is_decimal) return make_decimal(t.mantissa, t.exponent10);
            return make_integer(t.mantissa);
        }
        if (t.kind == Tok::Letter) {
            advance();
            if (t.text == "e") return make_constant(NamedConstant::Euler);
            return make_variable(t.text);
        }
        fail(t, {"'{'", "digit", "letter"});
    }

    std::string parse_subscript_text() {
        const Token& t = peek();
        if (t.kind == Tok::LBrace) {
            advance();
            std::string sub;
            while (peek().kind != Tok::RBrace) {
                const Token& s = peek();
                if (s.kind == Tok::Letter || (s.kind == Tok::Number && !s.is_decimal)) {
                    sub += s.text;
                    advance();
                } else if (s.kind == Tok::Command &&
                           (greek_commands().count(s.text) || s.text == "pi")) {
                    sub += "\\" + s.text;
                    advance();
                } else if (s.kind == Tok::Command && (s.text == "mathrm" || s.text == "text")) {
                    advance();
                    expect(Tok::LBrace);
                    while (peek().kind == Tok::Letter || (peek().kind == Tok::Number && !peek().is_decimal)) {
                        sub += peek().text;
                        advance();
                    }
                    expect(Tok::RBrace);
                } else {
                    fail(s, {"letter", "digit", "greek letter", "'}'"});
                }
            }
            expect(Tok::RBrace);
            if (sub.empty()) fail(t, {"nonempty subscript"});
            return sub;
        }
        if (t.kind == Tok::Letter) {
            advance();
            return t.text;
        }
        if (t.kind == Tok::Number && !t.is_decimal && t.text.size() == 1) {
            advance();
            return t.text;
        }
        if (t.kind == Tok::Number && !t.is_decimal) {
            // `P_10` subscripts the first digit only, matching TeX.
            advance();
            return t.text.substr(0, 1);
        }
        if (t.kind == Tok::Command && greek_commands().count(t.text)) {
            advance();
            return "\\" + t.text;
        }
        fail(t, {"letter", "digit", "'{'"});
    }

    ExprPtr parse_variable(std::string base) {
        std::string sub;
        if (peek().kind == Tok::Underscore) {
            advance();
            sub = parse_subscript_text();
        }
        return make_variable(std::move(base), std::move(sub));
    }

    ExprPtr parse_atom() {
        const Token& t = peek();
        switch (t.kind) {
            case Tok::Number: {
                advance();
                if (t.is_decimal) return make_decimal(t.mantissa, t.exponent10);
                return make_integer(t.mantissa);
            }
            case Tok::Letter: {
                advance();
                if (t.text == "e" && peek().kind != Tok::Underscore)
                    return make_constant(NamedConstant::Euler);
                return parse_variable(t.text);
            }
            case Tok::LParen:
                return parse_paren();
            case Tok::LBrace:
                return parse_braced();
            case Tok::Pipe: {
                advance();
                ExprPtr inner = parse_sum();
                expect(Tok::Pipe);
                return make_call(Builtin::Abs, inner);
            }
            case Tok::Command:
                return parse_command_atom();
            default:
                fail(t, {"number", "variable", "constant", "function", "'('", "'{'"});
        }
    }

    ExprPtr parse_command_atom() {
        const Token& t = advance();
        const std::string& name = t.text;
        if (name == "pi") return make_constant(NamedConstant::Pi);
        if (greek_commands().count(name)) return parse_variable("\\" + name);
        if (name == "frac") {
            ExprPtr num = parse_frac_arg();
            ExprPtr den = parse_frac_arg();
            return make_binary(NodeKind::Div, num, den);
        }
        if (name == "vec") {
            expect(Tok::LBrace);
            const Token& inner = peek();
            std::string base;
            if (inner.kind == Tok::Letter) {
                base = inner.text;
                advance();
            } else if (inner.kind == Tok::Command && greek_commands().count(inner.text)) {
                base = "\\" + inner.text;
                advance();
            } else {
                fail(inner, {"letter", "greek letter"});
            }
            std::string sub;
            if (peek().kind == Tok::Underscore) {
                advance();
                sub = parse_subscript_text();
            }
            expect(Tok::RBrace);
            return make_variable(std::move(base), std::move(sub), true);
        }
        Builtin f;
        if (is_function_command(name, &f)) {
            if (f == Builtin::Sqrt) {
                if (peek().kind == Tok::LBrace) return make_call(f, parse_braced());
                return make_call(f, parse_atom());
            }
            const Token& nxt = peek();
            if (nxt.kind == Tok::LParen) return make_call(f, parse_paren());
            if (nxt.kind == Tok::LBrace) return make_call(f, parse_braced());
            // Bare argument: \sin x^2 applies to the whole power.
            return make_call(f, parse_power());
        }
        throw UnsupportedCommand("unsupported LaTeX command '\\" + name + "' at byte " +
                                     std::to_string(t.offset),
                                 t.offset, name);
    }
};

// Strips a trailing unit annotation: optional spacing then \mathrm{...} or
// \text{...} at the very end of the answer string.
std::string_view strip_unit_suffix(std::string_view s) {
    auto rtrim = [&](std::string_view v) {
        while (!v.empty()) {
            char c = v.back();
            if (c == ' ' || c == '\t' || c == '\n' || c == '~' || c == '$') {
                v.remove_suffix(1);
            } else if (v.size() >= 2 && v[v.size() - 2] == '\\' &&
                       (c == ',' || c == ';' || c == '!' || c == ' ')) {
                v.remove_suffix(2);
            } else {
                break;
            }
        }
        return v;
    };
    s = rtrim(s);
    while (!s.empty() && s.back() == '}') {
        // Match the brace group backwards.
        int depth = 0;
        size_t i = s.size();
        while (i > 0) {
            --i;
            if (s[i] == '}') ++depth;
            else if (s[i] == '{') {
                --depth;
                if (depth == 0) break;
            }
        }
        if (depth != 0) break;
        size_t brace = i;
        auto ends_with_cmd = [&](std::string_view cmd) {
            return brace >= cmd.size() && s.substr(brace - cmd.size(), cmd.size()) == cmd;
        };
        if (ends_with_cmd("\\mathrm")) {
            s = rtrim(s.substr(0, brace - 7));
        } else if (ends_with_cmd("\\text")) {
            s = rtrim(s.substr(0, brace - 5));
        } else if (ends_with_cmd("\\,\\mathrm")) {
            s = rtrim(s.substr(0, brace - 9));
        } else {
            break;
        }
    }
    return rtrim(s);
}

}  // namespace

ParseError::ParseError(std::string msg, size_t offset_, std::vector<std::string> expected_,
                       std::string found_)
    : std::runtime_error(std::move(msg)),
      offset(offset_),
      expected(std::move(expected_)),
      found(std::move(found_)) {}

UnsupportedCommand::UnsupportedCommand(std::string msg, size_t offset_, std::string command_)
    : std::runtime_error(std::move(msg)), offset(offset_), command(std::move(command_)) {}

ExprPtr parse_expression(std::string_view text) {
    std::string_view body = strip_unit_suffix(text);
    if (body.empty()) {
        throw ParseError("parse error: empty expression", 0, {"expression"}, "end of input");
    }
    Lexer lex{body};
    lex.run();
    Parser parser(lex.tokens);
    ExprPtr e = parser.parse_sum();
    if (parser.peek().kind != Tok::End) {
        parser.fail(parser.peek(), {"operator", "end of input"});
    }
    return e;
}

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

namespace {

bool is_rational(const ExprPtr& e) { return e->kind == NodeKind::Rational; }

bool rational_is_integer(const BigRational& r) {
    return boost::multiprecision::denominator(r) == 1;
}

BigRational pow10(int32_t e) {
    BigRational r = 1;
    BigInt p = boost::multiprecision::pow(BigInt(10), static_cast<unsigned>(e < 0 ? -e : e));
    if (e >= 0) return BigRational(p);
    return BigRational(1, p);
}

// b^e for integer e with size guards; returns false when folding would blow up.
bool fold_pow(const BigRational& b, const BigRational& e, BigRational* out) {
    if (!rational_is_integer(e)) return false;
    BigInt ei = boost::multiprecision::numerator(e);
    if (boost::multiprecision::abs(ei) > 512) return false;
    if (b == 0) {
        if (ei <= 0) return false;
        *out = 0;
        return true;
    }
    BigInt num = boost::multiprecision::numerator(b);
    BigInt den = boost::multiprecision::denominator(b);
    if (num.str().size() + den.str().size() > 128) return false;
    unsigned n = static_cast<unsigned>(ei < 0 ? -ei : ei);
    BigInt pn = boost::multiprecision::pow(num, n);
    BigInt pd = boost::multiprecision::pow(den, n);
    if (ei >= 0) *out = BigRational(pn, pd);
    else *out = BigRational(pd, pn);
    return true;
}

ExprPtr sum_of(std::vector<ExprPtr> terms) {
    std::vector<ExprPtr> flat;
    BigRational acc = 0;
    for (auto& t : terms) {
        if (t->kind == NodeKind::Sum) {
            for (auto& c : t->children) {
                if (is_rational(c)) acc += c->rational;
                else flat.push_back(c);
            }
        } else if (is_rational(t)) {
            acc += t->rational;
        } else {
            flat.push_back(std::move(t));
        }
    }
    std::sort(flat.begin(), flat.end(),
              [](const ExprPtr& a, const ExprPtr& b) { return compare(a, b) < 0; });
    if (flat.empty()) return make_rational(acc);
    if (acc != 0) flat.insert(flat.begin(), make_rational(acc));
    if (flat.size() == 1) return flat[0];
    return make_nary(NodeKind::Sum, std::move(flat));
}

ExprPtr product_of(std::vector<ExprPtr> factors) {
    std::vector<ExprPtr> flat;
    BigRational acc = 1;
    for (auto& f : factors) {
        if (f->kind == NodeKind::Product) {
            for (auto& c : f->children) {
                if (is_rational(c)) acc *= c->rational;
                else flat.push_back(c);
            }
        } else if (is_rational(f)) {
            acc *= f->rational;
        } else {
            flat.push_back(std::move(f));
        }
    }
    if (acc == 0) return make_rational(BigRational(0));
    std::sort(flat.begin(), flat.end(),
              [](const ExprPtr& a, const ExprPtr& b) { return compare(a, b) < 0; });
    if (flat.empty()) return make_rational(acc);
    if (acc != 1) flat.insert(flat.begin(), make_rational(acc));
    if (flat.size() == 1) return flat[0];
    return make_nary(NodeKind::Product, std::move(flat));
}

ExprPtr pow_of(ExprPtr base, ExprPtr exp) {
    if (is_rational(exp)) {
        if (exp->rational == 0) return make_rational(BigRational(1));
        if (exp->rational == 1) return base;
        if (is_rational(base)) {
            BigRational folded;
            if (fold_pow(base->rational, exp->rational, &folded)) return make_rational(folded);
        }
    }
    if (is_rational(base) && base->rational == 1) return make_rational(BigRational(1));
    return make_binary(NodeKind::Pow, std::move(base), std::move(exp));
}

bool perfect_square(const BigInt& v, BigInt* root) {
    if (v < 0) return false;
    BigInt r = boost::multiprecision::sqrt(v);
    if (r * r == v) {
        *root = r;
        return true;
    }
    return false;
}

ExprPtr call_of(Builtin f, ExprPtr arg) {
    if (is_rational(arg)) {
        const BigRational& r = arg->rational;
        switch (f) {
            case Builtin::Abs:
                return make_rational(r < 0 ? BigRational(-r) : r);
            case Builtin::Sqrt: {
                BigInt rn, rd;
                if (r >= 0 && perfect_square(boost::multiprecision::numerator(r), &rn) &&
                    perfect_square(boost::multiprecision::denominator(r), &rd)) {
                    return make_rational(BigRational(rn, rd));
                }
                break;
            }
            case Builtin::Exp:
                if (r == 0) return make_rational(BigRational(1));
                break;
            case Builtin::Ln:
            case Builtin::Log:
                if (r == 1) return make_rational(BigRational(0));
                break;
            case Builtin::Sin:
            case Builtin::Tan:
                if (r == 0) return make_rational(BigRational(0));
                break;
            case Builtin::Cos:
                if (r == 0) return make_rational(BigRational(1));
                break;
        }
    }
    return make_call(f, std::move(arg));
}

}  // namespace

ExprPtr canonicalize(const ExprPtr& e) {
    switch (e->kind) {
        case NodeKind::Integer:
            return make_rational(BigRational(e->int_value));
        case NodeKind::Decimal:
            return make_rational(BigRational(e->mantissa) * pow10(e->exponent10));
        case NodeKind::Rational:
        case NodeKind::Constant:
        case NodeKind::Variable:
            return e;
        case NodeKind::Negate:
            return product_of({make_rational(BigRational(-1)), canonicalize(e->children[0])});
        case NodeKind::Add:
            return sum_of({canonicalize(e->children[0]), canonicalize(e->children[1])});
        case NodeKind::Sub:
            return sum_of({canonicalize(e->children[0]),
                           product_of({make_rational(BigRational(-1)),
                                       canonicalize(e->children[1])})});
        case NodeKind::Sum: {
            std::vector<ExprPtr> terms;
            terms.reserve(e->children.size());
            for (auto& c : e->children) terms.push_back(canonicalize(c));
            return sum_of(std::move(terms));
        }
        case NodeKind::Mul:
            return product_of({canonicalize(e->children[0]), canonicalize(e->children[1])});
        case NodeKind::Div:
            return product_of({canonicalize(e->children[0]),
                               pow_of(canonicalize(e->children[1]),
                                      make_rational(BigRational(-1)))});
        case NodeKind::Product: {
            std::vector<ExprPtr> factors;
            factors.reserve(e->children.size());
            for (auto& c : e->children) factors.push_back(canonicalize(c));
            return product_of(std::move(factors));
        }
        case NodeKind::Pow:
            return pow_of(canonicalize(e->children[0]), canonicalize(e->children[1]));
        case NodeKind::Call:
            return call_of(e->func, canonicalize(e->children[0]));
    }
    return e;
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

namespace {

// Precedence levels for parenthesization: sum < product < unary < power < atom.
enum Prec { PrecSum = 0, PrecProduct = 1, PrecUnary = 2, PrecPower = 3, PrecAtom = 4 };

int node_prec(const ExprPtr& e) {
    switch (e->kind) {
        case NodeKind::Add:
        case NodeKind::Sub:
        case NodeKind::Sum:
            return PrecSum;
        case NodeKind::Mul:
        case NodeKind::Product:
            return PrecProduct;
        case NodeKind::Negate:
            return PrecUnary;
        case NodeKind::Pow:
            return PrecPower;
        case NodeKind::Rational:
            return boost::multiprecision::denominator(e->rational) == 1 &&
                           boost::multiprecision::numerator(e->rational) >= 0
                       ? PrecAtom
                       : PrecAtom;  // printed as \frac or negative handled below
        case NodeKind::Div:
            return PrecAtom;  // printed as \frac{..}{..}
        default:
            return PrecAtom;
    }
}

std::string variable_latex(const Expr& v) {
    std::string s = v.var_base;
    if (!v.var_sub.empty()) {
        if (v.var_sub.size() == 1) s += "_" + v.var_sub;
        else s += "_{" + v.var_sub + "}";
    }
    if (v.var_vec) s = "\\vec{" + s + "}";
    return s;
}

void print(const ExprPtr& e, int parent_prec, std::string& out);

void print_wrapped(const ExprPtr& e, int parent_prec, std::string& out) {
    int prec = node_prec(e);
    bool need_paren = prec < parent_prec;
    // Negative literals under operators need parens to survive reparsing.
    if (!need_paren && parent_prec >= PrecProduct) {
        if (e->kind == NodeKind::Integer && e->int_value < 0) need_paren = true;
        if (e->kind == NodeKind::Rational && e->rational < 0) need_paren = true;
        if (e->kind == NodeKind::Decimal && e->mantissa < 0) need_paren = true;
    }
    if (need_paren) {
        out += "(";
        print(e, PrecSum, out);
        out += ")";
    } else {
        print(e, parent_prec, out);
    }
}

std::string decimal_latex(const Expr& d) {
    BigInt m = d.mantissa;
    bool neg = m < 0;
    if (neg) m = -m;
    std::string digits = m.str();
    std::string s;
    if (d.exponent10 >= 0) {
        s = digits + std::string(static_cast<size_t>(d.exponent10), '0');
    } else {
        size_t frac = static_cast<size_t>(-d.exponent10);
        if (digits.size() <= frac) digits.insert(0, frac - digits.size() + 1, '0');
        s = digits.substr(0, digits.size() - frac) + "." + digits.substr(digits.size() - frac);
    }
    return (neg ? "-" : "") + s;
}

void print(const ExprPtr& e, int parent_prec, std::string& out) {
    switch (e->kind) {
        case NodeKind::Integer:
            out += e->int_value.str();
            return;
        case NodeKind::Decimal:
            out += decimal_latex(*e);
            return;
        case NodeKind::Rational: {
            BigInt num = boost::multiprecision::numerator(e->rational);
            BigInt den = boost::multiprecision::denominator(e->rational);
            if (den == 1) {
                out += num.str();
            } else if (num < 0) {
                out += "-\\frac{" + BigInt(-num).str() + "}{" + den.str() + "}";
            } else {
                out += "\\frac{" + num.str() + "}{" + den.str() + "}";
            }
            return;
        }
        case NodeKind::Constant:
            out += e->constant == NamedConstant::Pi ? "\\pi" : "e";
            return;
        case NodeKind::Variable:
            out += variable_latex(*e);
            return;
        case NodeKind::Negate:
            out += "-";
            print_wrapped(e->children[0], PrecUnary, out);
            return;
        case NodeKind::Add:
            print_wrapped(e->children[0], PrecSum, out);
            out += " + ";
            print_wrapped(e->children[1], PrecProduct, out);
            return;
        case NodeKind::Sub:
            print_wrapped(e->children[0], PrecSum, out);
            out += " - ";
            print_wrapped(e->children[1], PrecProduct, out);
            return;
        case NodeKind::Sum:
            for (size_t i = 0; i < e->children.size(); ++i) {
                if (i) out += " + ";
                print_wrapped(e->children[i], i ? PrecProduct : PrecSum, out);
            }
            return;
        case NodeKind::Mul:
            print_wrapped(e->children[0], PrecProduct, out);
            out += " \\cdot ";
            print_wrapped(e->children[1], PrecUnary, out);
            return;
        case NodeKind::Product:
            for (size_t i = 0; i < e->children.size(); ++i) {
                if (i) out += " \\cdot ";
                print_wrapped(e->children[i], i ? PrecUnary : PrecProduct, out);
            }
            return;
        case NodeKind::Div: {
            std::string num, den;
            print(e->children[0], PrecSum, num);
            print(e->children[1], PrecSum, den);
            out += "\\frac{" + num + "}{" + den + "}";
            return;
        }
        case NodeKind::Pow: {
            print_wrapped(e->children[0], PrecAtom, out);
            std::string exp;
            print(e->children[1], PrecSum, exp);
            out += "^{" + exp + "}";
            return;
        }
        case NodeKind::Call: {
            static const char* names[] = {"\\sin", "\\cos", "\\tan", "\\log",
                                          "\\ln",  "\\exp", "\\sqrt", "\\abs"};
            std::string arg;
            print(e->children[0], PrecSum, arg);
            if (e->func == Builtin::Sqrt || e->func == Builtin::Abs) {
                out += std::string(names[static_cast<int>(e->func)]) + "{" + arg + "}";
            } else {
                out += std::string(names[static_cast<int>(e->func)]) + "(" + arg + ")";
            }
            return;
        }
    }
}

}  // namespace

std::string to_latex(const ExprPtr& e) {
    std::string out;
    print(e, PrecSum, out);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::set<std::string> free_variables(const ExprPtr& e) {
    std::set<std::string> vars;
    std::vector<const Expr*> stack{e.get()};
    while (!stack.empty()) {
        const Expr* n = stack.back();
        stack.pop_back();
        if (n->kind == NodeKind::Variable) vars.insert(n->variable_key());
        for (auto& c : n->children) stack.push_back(c.get());
    }
    return vars;
}

long double evaluate(const ExprPtr& e, const std::map<std::string, long double>& env) {
    switch (e->kind) {
        case NodeKind::Integer:
            return e->int_value.convert_to<long double>();
        case NodeKind::Decimal:
            return (BigRational(e->mantissa) * pow10(e->exponent10)).convert_to<long double>();
        case NodeKind::Rational:
            return e->rational.convert_to<long double>();
        case NodeKind::Constant:
            return e->constant == NamedConstant::Pi ? std::numbers::pi_v<long double>
                                                    : std::numbers::e_v<long double>;
        case NodeKind::Variable: {
            auto it = env.find(e->variable_key());
            if (it == env.end()) return std::numeric_limits<long double>::quiet_NaN();
            return it->second;
        }
        case NodeKind::Negate:
            return -evaluate(e->children[0], env);
        case NodeKind::Add:
            return evaluate(e->children[0], env) + evaluate(e->children[1], env);
        case NodeKind::Sub:
            return evaluate(e->children[0], env) - evaluate(e->children[1], env);
        case NodeKind::Mul:
            return evaluate(e->children[0], env) * evaluate(e->children[1], env);
        case NodeKind::Div:
            return evaluate(e->children[0], env) / evaluate(e->children[1], env);
        case NodeKind::Sum: {
            long double acc = 0;
            for (auto& c : e->children) acc += evaluate(c, env);
            return acc;
        }
        case NodeKind::Product: {
            long double acc = 1;
            for (auto& c : e->children) acc *= evaluate(c, env);
            return acc;
        }
        case NodeKind::Pow:
            return std::pow(evaluate(e->children[0], env), evaluate(e->children[1], env));
        case NodeKind::Call: {
            long double a = evaluate(e->children[0], env);
            switch (e->func) {
                case Builtin::Sin: return std::sin(a);
                case Builtin::Cos: return std::cos(a);
                case Builtin::Tan: return std::tan(a);
                case Builtin::Log: return std::log10(a);
                case Builtin::Ln: return std::log(a);
                case Builtin::Exp: return std::exp(a);
                case Builtin::Sqrt: return std::sqrt(a);
                case Builtin::Abs: return std::fabs(a);
            }
        }
    }
    return std::numeric_limits<long double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// Equivalence
// ---------------------------------------------------------------------------

namespace {

// Variables occurring anywhere under log/ln/sqrt get positive-only probes.
void collect_positive_only(const ExprPtr& e, bool under_domain_fn,
                           std::set<std::string>& out) {
    if (e->kind == NodeKind::Variable && under_domain_fn) out.insert(e->variable_key());
    bool next = under_domain_fn;
    if (e->kind == NodeKind::Call &&
        (e->func == Builtin::Log || e->func == Builtin::Ln || e->func == Builtin::Sqrt)) {
        next = true;
    }
    for (auto& c : e->children) collect_positive_only(c, next, out);
}

}  // namespace

EquivalenceVerdict expr_equivalent(const ExprPtr& a, const ExprPtr& b,
                                   const ProbeConfig& cfg) {
    ExprPtr ca = canonicalize(a);
    ExprPtr cb = canonicalize(b);
    if (structurally_equal(ca, cb)) {
        return {Verdict::Equivalent, Method::ExactRational, 0};
    }
    if (is_rational(ca) && is_rational(cb)) {
        // Both reduce to exact rationals and they differ.
        return {Verdict::NotEquivalent, Method::ExactRational, 0};
    }

    std::set<std::string> vars = free_variables(ca);
    for (auto& v : free_variables(cb)) vars.insert(v);
    std::set<std::string> positive_only;
    collect_positive_only(ca, false, positive_only);
    collect_positive_only(cb, false, positive_only);

    SplitMix64 rng(cfg.seed);
    int valid = 0;
    for (int p = 0; p < cfg.probes; ++p) {
        std::map<std::string, long double> env;
        for (const auto& v : vars) {
            double mag = rng.uniform(0.1, 2.0);
            bool negate = !positive_only.count(v) && (rng.next() & 1);
            env[v] = static_cast<long double>(negate ? -mag : mag);
        }
        long double va = evaluate(ca, env);
        long double vb = evaluate(cb, env);
        if (!std::isfinite(static_cast<double>(va)) || !std::isfinite(static_cast<double>(vb))) {
            continue;
        }
        ++valid;
        long double bound = static_cast<long double>(cfg.abs_tol) +
                            static_cast<long double>(cfg.rel_tol) *
                                std::max(std::fabs(va), std::fabs(vb));
        if (std::fabs(va - vb) > bound) {
            return {Verdict::NotEquivalent, Method::NumericProbe, valid};
        }
    }
    if (valid >= cfg.min_valid) {
        return {Verdict::Equivalent, Method::NumericProbe, valid};
    }
    return {Verdict::Indeterminate, Method::NumericProbe, valid};
}

}  // namespace deskrl::expr
