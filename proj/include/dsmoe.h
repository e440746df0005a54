/* C interface to the dsmoe core. All functions return DSMOE_OK (0) or an
 * error code; dsmoe_last_error() holds a thread-local message for the most
 * recent failure on the calling thread. Strings returned through char**
 * parameters are heap-allocated and must be released with
 * dsmoe_string_free(); models with dsmoe_model_free(). */
#ifndef DSMOE_H
#define DSMOE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define DSMOE_OK 0
#define DSMOE_E_INVALID_ARGUMENT 1
#define DSMOE_E_SHAPE_MISMATCH 2
#define DSMOE_E_INVALID_STATE 3
#define DSMOE_E_IO 4
#define DSMOE_E_BAD_MAGIC 5
#define DSMOE_E_TRUNCATED 6
#define DSMOE_E_SCHEMA 7
#define DSMOE_E_INTERNAL 8

typedef struct dsmoe_model dsmoe_model;

const char* dsmoe_version(void);
const char* dsmoe_status_name(int code);
const char* dsmoe_last_error(void);
void dsmoe_string_free(char* s);
void dsmoe_model_free(dsmoe_model* m);

/* config_json keys: d_model, d_ffn, num_experts, top_k, num_shared_experts,
 * gate_prenormalized, num_layers. scalar_width is 4 or 8. */
int dsmoe_generate_model(const char* config_json, uint64_t seed, double scale, int scalar_width,
                         dsmoe_model** out);

/* Writes a token file: 16-byte header (rows, cols as u64 LE), float32 LE
 * payload; values are Gaussian(0, scale) from the seeded generator. */
int dsmoe_generate_tokens(int64_t rows, int64_t cols, uint64_t seed, double scale,
                          const char* path);

int dsmoe_model_load(const char* path, dsmoe_model** out);
int dsmoe_model_save(const dsmoe_model* m, const char* path);

/* JSON description: config, scalar width, per-layer lineage/replay factor. */
int dsmoe_model_info(const dsmoe_model* m, char** json_out);

/* mode: "complete" or "partial"; p >= 2 and must divide d_ffn. */
int dsmoe_transform(const dsmoe_model* m, const char* mode, int p, dsmoe_model** out);

int dsmoe_reverse_partial(const dsmoe_model* m, dsmoe_model** out);

/* metric: gate | abs_gate | gate_up | abs_gate_up (dashes accepted).
 * profiles_json_out (optional) receives the per-layer importance profiles. */
int dsmoe_reconstruct(const dsmoe_model* m, const char* tokens_path, const char* metric,
                      dsmoe_model** out, char** profiles_json_out);

/* Compares full-model forward outputs of a and b on the given tokens. */
int dsmoe_verify_equivalence(const dsmoe_model* a, const dsmoe_model* b, const char* tokens_path,
                             double tol, char** json_out);

/* policy_json keys: kind ("none"|"1t"|"2t"), t_drop, t_major, t_minor
 * (optional for 2t, default t_drop -/+ 0.01), keep_top1 (default true),
 * normalize (default: false only for gate-prenormalized models). */
int dsmoe_infer(const dsmoe_model* m, const char* tokens_path, const char* policy_json,
                char** json_out);

/* policy_kind: "1t" or "2t"; thresholds must be sorted ascending. */
int dsmoe_sweep(const dsmoe_model* m, const char* tokens_path, const char* policy_kind,
                const double* thresholds, size_t n, int keep_top1, char** json_out,
                char** csv_out);

int dsmoe_analyze_gating(const dsmoe_model* m, const char* tokens_path, int bins, char** json_out,
                         char** csv_out);

/* strategy: "contiguous" or "round_robin". */
int dsmoe_sim_ep(const dsmoe_model* m, const char* tokens_path, int devices, const char* strategy,
                 const char* policy_json, int load_aware, char** json_out);

/* scenario_json keys: ep, tp, tokens_per_device, bytes_per_token, alpha,
 * beta, num_experts, seed (routing is drawn uniformly from the seed). */
int dsmoe_sim_comm(const char* scenario_json, char** json_out);

int dsmoe_sim_comm_sweep(const char* scenario_json, const int64_t* sizes, size_t n,
                         char** json_out, char** csv_out);

#ifdef __cplusplus
}
#endif

#endif /* DSMOE_H */
