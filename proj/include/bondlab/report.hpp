#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bondlab/types.hpp"

namespace bondlab {

// Report values with deterministic serialization: object members keep
// insertion order, floats print with 17 significant digits, and a rerun with
// the same inputs emits byte-identical files. Non-finite numbers serialize
// as the strings "inf", "-inf", "nan".

class JsonValue {
 public:
  JsonValue() : kind_(Kind::Null) {}
  static JsonValue boolean(bool b);
  static JsonValue number(double v);
  static JsonValue integer(long long v);
  static JsonValue str(std::string s);
  static JsonValue array();
  static JsonValue object();

  JsonValue& push(JsonValue v);                      // array append
  JsonValue& set(const std::string& key, JsonValue v);  // object insert/update
  JsonValue& set(const std::string& key, double v);
  JsonValue& set(const std::string& key, long long v);
  JsonValue& set(const std::string& key, int v);
  JsonValue& set(const std::string& key, Index v);
  JsonValue& set(const std::string& key, bool v);
  JsonValue& set(const std::string& key, const char* v);
  JsonValue& set(const std::string& key, const std::string& v);

  std::string dump(int indent = 2) const;

 private:
  enum class Kind { Null, Bool, Number, Integer, String, Array, Object };
  void write(std::string& out, int indent, int depth) const;

  Kind kind_;
  bool b_ = false;
  double num_ = 0.0;
  long long int_ = 0;
  std::string str_;
  std::vector<JsonValue> arr_;
  std::vector<std::pair<std::string, JsonValue>> obj_;
};

/// %.17g with a stable exponent form.
std::string format_double(double v);

/// Writes text to path, creating parent directories; throws
/// ConfigurationError on failure.
void write_text_file(const std::string& path, const std::string& text);

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<double>& values);
  void row_mixed(const std::vector<std::string>& cells);
  const std::string& text() const { return text_; }
  void save(const std::string& path) const { write_text_file(path, text_); }

 private:
  std::string text_;
  std::size_t columns_ = 0;
};

}  // namespace bondlab
