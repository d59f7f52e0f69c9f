#include "bondlab/report.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace bondlab {

JsonValue JsonValue::boolean(bool b) {
  JsonValue v;
  v.kind_ = Kind::Bool;
  v.b_ = b;
  return v;
}
JsonValue JsonValue::number(double d) {
  JsonValue v;
  v.kind_ = Kind::Number;
  v.num_ = d;
  return v;
}
JsonValue JsonValue::integer(long long i) {
  JsonValue v;
  v.kind_ = Kind::Integer;
  v.int_ = i;
  return v;
}
JsonValue JsonValue::str(std::string s) {
  JsonValue v;
  v.kind_ = Kind::String;
  v.str_ = std::move(s);
  return v;
}
JsonValue JsonValue::array() {
  JsonValue v;
  v.kind_ = Kind::Array;
  return v;
}
JsonValue JsonValue::object() {
  JsonValue v;
  v.kind_ = Kind::Object;
  return v;
}

JsonValue& JsonValue::push(JsonValue v) {
  arr_.push_back(std::move(v));
  return *this;
}

JsonValue& JsonValue::set(const std::string& key, JsonValue v) {
  for (auto& [k, old] : obj_)
    if (k == key) {
      old = std::move(v);
      return *this;
    }
  obj_.emplace_back(key, std::move(v));
  return *this;
}
JsonValue& JsonValue::set(const std::string& key, double v) {
  return set(key, number(v));
}
JsonValue& JsonValue::set(const std::string& key, long long v) {
  return set(key, integer(v));
}
JsonValue& JsonValue::set(const std::string& key, int v) {
  return set(key, integer(v));
}
JsonValue& JsonValue::set(const std::string& key, Index v) {
  return set(key, integer(static_cast<long long>(v)));
}
JsonValue& JsonValue::set(const std::string& key, bool v) {
  return set(key, boolean(v));
}
JsonValue& JsonValue::set(const std::string& key, const char* v) {
  return set(key, str(v));
}
JsonValue& JsonValue::set(const std::string& key, const std::string& v) {
  return set(key, str(v));
}

std::string format_double(double v) {
  if (std::isnan(v)) return "\"nan\"";
  if (std::isinf(v)) return v > 0 ? "\"inf\"" : "\"-inf\"";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

void write_escaped(std::string& out, const std::string& s) {
  out += '"';
  for (char c : s) {
    switch (c) {
      case '"':
        out += "\\\"";
        break;
      case '\\':
        out += "\\\\";
        break;
      case '\n':
        out += "\\n";
        break;
      case '\t':
        out += "\\t";
        break;
      default:
        out += c;
    }
  }
  out += '"';
}

void pad(std::string& out, int indent, int depth) {
  if (indent > 0) out.append(static_cast<std::size_t>(indent) * depth, ' ');
}

}  // namespace

void JsonValue::write(std::string& out, int indent, int depth) const {
  const char* nl = indent > 0 ? "\n" : "";
  switch (kind_) {
    case Kind::Null:
      out += "null";
      break;
    case Kind::Bool:
      out += b_ ? "true" : "false";
      break;
    case Kind::Number:
      out += format_double(num_);
      break;
    case Kind::Integer:
      out += std::to_string(int_);
      break;
    case Kind::String:
      write_escaped(out, str_);
      break;
    case Kind::Array: {
      if (arr_.empty()) {
        out += "[]";
        break;
      }
      out += "[";
      out += nl;
      for (std::size_t i = 0; i < arr_.size(); ++i) {
        pad(out, indent, depth + 1);
        arr_[i].write(out, indent, depth + 1);
        if (i + 1 < arr_.size()) out += ",";
        out += nl;
      }
      pad(out, indent, depth);
      out += "]";
      break;
    }
    case Kind::Object: {
      if (obj_.empty()) {
        out += "{}";
        break;
      }
      out += "{";
      out += nl;
      for (std::size_t i = 0; i < obj_.size(); ++i) {
        pad(out, indent, depth + 1);
        write_escaped(out, obj_[i].first);
        out += indent > 0 ? ": " : ":";
        obj_[i].second.write(out, indent, depth + 1);
        if (i + 1 < obj_.size()) out += ",";
        out += nl;
      }
      pad(out, indent, depth);
      out += "}";
      break;
    }
  }
}

std::string JsonValue::dump(int indent) const {
  std::string out;
  write(out, indent, 0);
  out += "\n";
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigurationError("cannot write " + path);
  f << text;
  if (!f) throw ConfigurationError("short write to " + path);
}

CsvWriter::CsvWriter(std::vector<std::string> header)
    : columns_(header.size()) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    text_ += header[i];
    text_ += i + 1 < header.size() ? "," : "\n";
  }
}

void CsvWriter::row(const std::vector<double>& values) {
  if (values.size() != columns_)
    throw InvalidInput("CsvWriter: column count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
    text_ += buf;
    text_ += i + 1 < values.size() ? "," : "\n";
  }
}

void CsvWriter::row_mixed(const std::vector<std::string>& cells) {
  if (cells.size() != columns_)
    throw InvalidInput("CsvWriter: column count mismatch");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    text_ += cells[i];
    text_ += i + 1 < cells.size() ? "," : "\n";
  }
}

}  // namespace bondlab
