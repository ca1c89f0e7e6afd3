#ifndef SAFECHAT_H
#define SAFECHAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SafechatStatus {
  SAFECHAT_STATUS_OK = 0,
  SAFECHAT_STATUS_NULL_POINTER = 1,
  SAFECHAT_STATUS_INVALID_UTF8 = 2,
  SAFECHAT_STATUS_INVALID_ARGUMENT = 3,
  SAFECHAT_STATUS_CORPUS = 4,
  SAFECHAT_STATUS_MODEL = 5,
  SAFECHAT_STATUS_POLICY = 6,
  SAFECHAT_STATUS_AUDIT = 7,
  SAFECHAT_STATUS_PANIC = 8,
} SafechatStatus;

typedef enum SafechatKind {
  SAFECHAT_KIND_ANSWER = 0,
  SAFECHAT_KIND_DEFLECT = 1,
  SAFECHAT_KIND_FALLBACK = 2,
} SafechatKind;

typedef enum SafechatVariant {
  SAFECHAT_VARIANT_EXPERIMENTAL = 0,
  SAFECHAT_VARIANT_CONTROL = 1,
} SafechatVariant;

/*
 Loaded corpus, model and policy.
 */
typedef struct SafechatEngine SafechatEngine;

/*
 One guarded decision.
 */
typedef struct SafechatResponse SafechatResponse;

typedef struct SafechatMannWhitney {
  double u;
  double u_a;
  double p_value;
  bool exact;
} SafechatMannWhitney;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. Valid until the
 next failing call on the same thread.
 */
const char *safechat_last_error(void);

/*
 Opens a corpus and the model trained on it. `policy_path` may be null for
 the bundled policy.

 # Safety
 String arguments must be null or valid NUL-terminated strings and `out`
 must be a valid pointer.
 */
enum SafechatStatus safechat_engine_open(const char *corpus_path,
                                         const char *model_path,
                                         const char *policy_path,
                                         struct SafechatEngine **out);

/*
 Loads a corpus and trains a model in memory with `k` paraphrases per
 question.

 # Safety
 As for [`safechat_engine_open`].
 */
enum SafechatStatus safechat_engine_train(const char *corpus_path,
                                          size_t k,
                                          const char *policy_path,
                                          struct SafechatEngine **out);

/*
 # Safety
 `engine` must be null or a handle from this library not yet freed.
 */
void safechat_engine_free(struct SafechatEngine *engine);

/*
 SHA-256 of the corpus the engine serves, as lowercase hex.

 # Safety
 `engine` must be a live handle.
 */
const char *safechat_engine_corpus_hash(const struct SafechatEngine *engine);

/*
 Classifies and guards one utterance.

 # Safety
 `engine` must be a live handle, `utterance` a valid NUL-terminated string
 and `out` a valid pointer.
 */
enum SafechatStatus safechat_engine_ask(struct SafechatEngine *engine,
                                        const char *utterance,
                                        struct SafechatResponse **out);

/*
 # Safety
 `response` must be a live handle.
 */
enum SafechatKind safechat_response_kind(const struct SafechatResponse *response);

/*
 # Safety
 `response` must be a live handle.
 */
const char *safechat_response_text(const struct SafechatResponse *response);

/*
 Null unless the response is an answer.

 # Safety
 `response` must be a live handle.
 */
const char *safechat_response_entry_id(const struct SafechatResponse *response);

/*
 Null unless the response is an answer.

 # Safety
 `response` must be a live handle.
 */
const char *safechat_response_source_url(const struct SafechatResponse *response);

/*
 Answer confidence, the best score behind a fallback, or NaN.

 # Safety
 `response` must be a live handle.
 */
double safechat_response_confidence(const struct SafechatResponse *response);

/*
 # Safety
 `response` must be null or a handle from this library not yet freed.
 */
void safechat_response_free(struct SafechatResponse *response);

/*
 Verifies an audit log. `first_broken` receives the 1-based line of the
 first bad record, or 0 when the chain is intact.

 # Safety
 `path` must be a valid NUL-terminated string; the out pointers must be
 valid.
 */
enum SafechatStatus safechat_audit_verify(const char *path,
                                          uint64_t *records,
                                          uint64_t *first_broken);

/*
 Two-sided Mann-Whitney U test of `a` against `b`.

 # Safety
 `a` and `b` must point to `na` and `nb` doubles; `out` must be valid.
 */
enum SafechatStatus safechat_mann_whitney(const double *a,
                                          size_t na,
                                          const double *b,
                                          size_t nb,
                                          struct SafechatMannWhitney *out);

/*
 Deterministic trial arm for a user.

 # Safety
 `user_id` must be a valid NUL-terminated string and `out` valid.
 */
enum SafechatStatus safechat_assign(const char *user_id, uint64_t seed, enum SafechatVariant *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFECHAT_H */
