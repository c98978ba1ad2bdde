#ifndef EREG_H
#define EREG_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum EregStatus {
  EREG_STATUS_OK = 0,
  EREG_STATUS_NULL_ARGUMENT = 1,
  EREG_STATUS_INVALID_UTF8 = 2,
  EREG_STATUS_INVALID_JSON = 3,
  EREG_STATUS_INVALID_INPUT = 4,
  EREG_STATUS_NOT_FOUND = 5,
  EREG_STATUS_PERMISSION_DENIED = 6,
  EREG_STATUS_CONFLICT = 7,
  EREG_STATUS_IO = 8,
  EREG_STATUS_PANIC = 9,
} EregStatus;

// A district register with its corpus and access rules.
typedef struct EregDistrict EregDistrict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string.
const char *ereg_version(void);

// Message of the last failed call on this thread, or null. Valid until
// the next call on this thread.
const char *ereg_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` is null or came from this library and was not freed before.
void ereg_string_free(char *s);

// Creates an empty district. `metamodel_json` and `permissions_json` may
// be null for the bundled metamodel and the default permission rules.
//
// # Safety
// String arguments are null or NUL-terminated; `out` is writable.
enum EregStatus ereg_district_new(uint32_t iid,
                                  const char *metamodel_json,
                                  const char *permissions_json,
                                  struct EregDistrict **out);

// Opens a district saved with [`ereg_district_save`].
//
// # Safety
// As for [`ereg_district_new`].
enum EregStatus ereg_district_load(const char *path,
                                   const char *metamodel_json,
                                   struct EregDistrict **out);

// # Safety
// `h` is a live handle; `path` is NUL-terminated.
enum EregStatus ereg_district_save(struct EregDistrict *h, const char *path);

// Destroys a handle. Null is ignored.
//
// # Safety
// `h` is null or a live handle, not used afterwards.
void ereg_district_free(struct EregDistrict *h);

// Gives `user` an ownership level ("owner", "editor", "reader",
// "generic") on a document.
//
// # Safety
// `h` is a live handle; strings are NUL-terminated.
enum EregStatus ereg_district_grant(struct EregDistrict *h,
                                    const char *user,
                                    const char *doc_id,
                                    const char *level);

// Ingests one pre-annotated document given as JSON; the pipeline report
// is written to `report_json`.
//
// # Safety
// `h` is a live handle; `document_json` is NUL-terminated; `report_json`
// is writable.
enum EregStatus ereg_district_ingest(struct EregDistrict *h,
                                     const char *document_json,
                                     char **report_json);

// Renders one entity as `user` sees it.
//
// # Safety
// `h` is a live handle; `user` is NUL-terminated; `out_json` is writable.
enum EregStatus ereg_district_entity(struct EregDistrict *h,
                                     const char *user,
                                     uint64_t local_id,
                                     char **out_json);

// Looks up entities of `type_name` matching a JSON object of attribute
// values.
//
// # Safety
// As for [`ereg_district_entity`].
enum EregStatus ereg_district_query(struct EregDistrict *h,
                                    const char *user,
                                    const char *type_name,
                                    const char *attributes_json,
                                    char **out_json);

// Neighbourhood of an entity up to `depth` hops.
//
// # Safety
// As for [`ereg_district_entity`].
enum EregStatus ereg_district_graph(struct EregDistrict *h,
                                    const char *user,
                                    uint64_t local_id,
                                    uint32_t depth,
                                    char **out_json);

// Aggregate counts, e.g. for `spec_json`
// `{"type_name":"person","group_by":{"by":"attribute","name":"gender"}}`.
// `metadata` and `tag` narrow the documents counted.
//
// # Safety
// As for [`ereg_district_entity`].
enum EregStatus ereg_district_stats(struct EregDistrict *h,
                                    const char *user,
                                    const char *spec_json,
                                    char **out_json);

// The register as JSON lines.
//
// # Safety
// `h` is a live handle; `out_jsonl` is writable.
enum EregStatus ereg_district_export(struct EregDistrict *h, char **out_jsonl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EREG_H */
