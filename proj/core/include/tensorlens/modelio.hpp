#pragma once

// Binary weight container, test fixtures with golden activations, map export
// and the JSONL dataset reader.
//
// Container layout (all integers little-endian):
//   "TLNS" | u32 version | u64 metadata_length | metadata JSON | payload
// Metadata: {"config": {...}, "tensors": [{"name", "dtype", "shape", "byte_offset"}]}
// with byte_offset relative to the payload start. The file ends exactly at the
// end of the last tensor.

#include "tensorlens/eval.hpp"
#include "tensorlens/model.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tensorlens {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'T', 'L', 'N', 'S'};

enum class Dtype { f32, f64 };
std::string_view to_string(Dtype d);

struct RawTensor {
    std::string name;
    Dtype dtype = Dtype::f64;
    std::vector<std::size_t> shape;
    std::vector<double> values;  // row-major; f32 tensors hold exactly representable values

    std::size_t element_count() const;
};

struct Container {
    std::string config_json;  // the "config" object, serialized
    std::vector<RawTensor> tensors;

    const RawTensor* find(std::string_view name) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
/// Throws BadMagicError, VersionMismatchError, TruncatedPayloadError,
/// ShapeMismatchError or MetadataError.
Container decode_container(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

std::string config_to_json(const ModelConfig& config);
/// Throws MetadataError on missing keys or wrong types, ValueError via validate().
ModelConfig config_from_json(const std::string& json);

Container container_from_model(const Model& model, Dtype dtype = Dtype::f64);
/// Throws MetadataError for missing tensors and ShapeMismatchError for wrong shapes.
Model model_from_container(const Container& c);

void save_model(const Model& model, const std::filesystem::path& path, Dtype dtype = Dtype::f64);
Model load_model(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Fixtures: a model container plus input_tokens ([L] or [P, L]) and optional
// goldens per input. golden_hidden_{n} for n < N is the input of block n and
// golden_hidden_{N} is the model output; golden_attn_{n}_{h} is head h of block n.
// With P inputs the goldens carry a leading P dimension.

struct Golden {
    std::vector<DenseMatrix> hidden;             // N + 1 entries
    std::optional<DenseMatrix> logits;
    std::vector<std::vector<DenseMatrix>> attn;  // [layer][head]
};

struct Fixture {
    Model model;
    std::vector<TokenSequence> inputs;
    std::vector<Golden> goldens;  // empty, or one per input
};

/// Goldens recomputed with the reference forward, stored at dtype.
Container fixture_container(const Model& model, const std::vector<TokenSequence>& inputs, bool with_goldens,
                            Dtype golden_dtype = Dtype::f32);
Fixture fixture_from_container(const Container& c);
Fixture load_fixture(const std::filesystem::path& path);

inline constexpr double kGoldenTolerance = 1e-4;

struct GoldenCheck {
    bool pass = true;
    double max_rel_error = 0.0;  // ||ours - golden||_F / max(||golden||_F, 1e-12)
    std::string worst;           // name of the worst tensor
};

GoldenCheck compare_goldens(const Model& model, const Fixture& fixture, double tolerance = kGoldenTolerance);

// ---------------------------------------------------------------------------
// Map export

/// Header "i,j,value", values printed with %.17g.
void write_map_csv(std::ostream& out, const DenseMatrix& map);
DenseMatrix read_map_csv(std::istream& in);
/// u64 L followed by L*L row-major f64, little-endian.
std::vector<std::uint8_t> encode_map_raw(const DenseMatrix& map);
DenseMatrix decode_map_raw(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Dataset: one JSON object per line,
// {"tokens": [...], "label"?: int, "relation"?: str, "subject_span"?: [a, b], "object_token"?: int}.

struct DatasetRecord {
    TokenSequence tokens;
    std::optional<TokenId> label;
    std::optional<std::string> relation;
    std::optional<std::pair<std::size_t, std::size_t>> subject_span;
    std::optional<TokenId> object_token;
};

/// Throws DatasetError carrying the 1-based line number. Blank lines are skipped.
std::vector<DatasetRecord> parse_dataset(std::istream& in);
std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path);
void write_dataset(std::ostream& out, const std::vector<DatasetRecord>& records);

/// Records with a relation and an object token, grouped as relation sets.
std::vector<RelationSet> relation_sets(const std::vector<DatasetRecord>& records);

} // namespace tensorlens
