#ifndef XSTREAM_H
#define XSTREAM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(XSTREAM_BUILDING)
#define XS_API __attribute__((visibility("default")))
#else
#define XS_API
#endif

typedef enum xs_status {
  XS_OK = 0,
  XS_ERR_ARGUMENT = 1,
  XS_ERR_BUFFER = 2, /* output buffer too small; *len holds the size needed */
  XS_ERR_DIMENSION = 3,
  XS_ERR_CONFIG = 4,
  XS_ERR_STEP = 5,
  XS_ERR_STATE = 6,
  XS_ERR_INPUT = 7,
  XS_ERR_IO = 8,
  XS_ERR_GRADCHECK = 9,
  XS_ERR_PROTOCOL = 10,
  XS_ERR_TRUNCATION = 11,
  XS_ERR_DIVERGED = 12,
  XS_ERR_REMOTE = 13, /* the server ended the stream with an error frame */
  XS_ERR_INTERNAL = 14
} xs_status;

XS_API const char* xs_version(void);
XS_API const char* xs_status_name(xs_status s);
/* Message of the last failure on the calling thread; "" when none. */
XS_API const char* xs_last_error(void);
/* Byte offset carried by the last XS_ERR_PROTOCOL on this thread. */
XS_API uint64_t xs_last_error_offset(void);

/* ---- configuration ---- */
typedef struct xs_config xs_config;

XS_API xs_status xs_config_new(xs_config** out);
XS_API void xs_config_free(xs_config* cfg);
XS_API xs_status xs_config_load(xs_config* cfg, const char* path);
/* "key=value"; unknown keys fail with XS_ERR_CONFIG naming the key. */
XS_API xs_status xs_config_set(xs_config* cfg, const char* assignment);
/* NUL-terminated copy into buf; *len receives the size including NUL. */
XS_API xs_status xs_config_get(const xs_config* cfg, const char* key, char* buf, size_t cap, size_t* len);

/* ---- engine: segment layout, actor, thinker, identity ---- */
typedef struct xs_engine xs_engine;

/* checkpoint may be NULL for seeded random actor weights. */
XS_API xs_status xs_engine_new(const xs_config* cfg, const char* checkpoint, xs_engine** out);
XS_API void xs_engine_free(xs_engine* engine);
XS_API uint32_t xs_engine_latent_dim(const xs_engine* engine);
XS_API uint32_t xs_engine_chunks_per_segment(const xs_engine* engine);

enum { XS_FRAME_TEXT = 0, XS_FRAME_AUDIO = 1, XS_FRAME_VIDEO = 2, XS_FRAME_CONTROL = 3 };
enum { XS_CONTROL_REQUEST = 0, XS_CONTROL_START = 1, XS_CONTROL_END = 2, XS_CONTROL_ERROR = 3 };

typedef struct xs_frame {
  uint8_t type;
  uint32_t segment;
  uint16_t chunk;
  const uint8_t* payload;
  uint32_t payload_len;
} xs_frame;

/* Return nonzero to keep receiving, zero to cancel. */
typedef int (*xs_frame_fn)(const xs_frame* frame, void* user);

enum { XS_QUERY_TEXT = 0, XS_QUERY_AUDIO = 1 };

typedef struct xs_query {
  int modality;
  const uint32_t* ids;
  size_t count;
} xs_query;

typedef struct xs_session_report {
  uint64_t frames;
  uint64_t text_frames;
  uint64_t audio_frames;
  uint64_t video_frames;
  double first_text_ms;
  double first_video_chunk_ms;
  double total_ms;
  double chunks_per_second;
  int cancelled;
} xs_session_report;

/* UTF-8 text to byte-level token ids. */
XS_API xs_status xs_text_tokens(const char* text, uint32_t* ids, size_t cap, size_t* len);

/* One pipeline session. Pacing, queue capacity and seed come from cfg
   (stream.*, XSTREAM_SEED). report may be NULL. */
XS_API xs_status xs_generate(const xs_engine* engine, const xs_config* cfg, const xs_query* queries, size_t nqueries,
                             uint32_t segments, xs_frame_fn fn, void* user, xs_session_report* report);

/* As xs_generate, writing the latents as XTAR and one JSON line per data frame. */
XS_API xs_status xs_generate_files(const xs_engine* engine, const xs_config* cfg, const xs_query* queries,
                                   size_t nqueries, uint32_t segments, const char* latents_path,
                                   const char* events_path, xs_session_report* report);

/* ---- training ---- */
typedef struct xs_train_options {
  uint64_t steps;
  const char* mode;       /* "diffusion" or "teacher"; NULL uses actor.forcing_mode */
  const char* checkpoint; /* written at the end */
  const char* loss_csv;   /* may be NULL */
  const char* resume;     /* may be NULL */
} xs_train_options;

typedef void (*xs_progress_fn)(uint64_t step, double loss, void* user);

typedef struct xs_train_report {
  uint64_t steps;
  double first_smoothed;
  double last_smoothed;
} xs_train_report;

XS_API xs_status xs_train(const xs_config* cfg, const xs_train_options* opts, xs_progress_fn fn, void* user,
                          xs_train_report* report);

typedef struct xs_drift_report {
  double mean;
  double max;
  double first;
  int diverged;
} xs_drift_report;

/* per_chunk may be NULL; otherwise it receives min(cap, horizon) values. */
XS_API xs_status xs_drift(const xs_config* cfg, const char* checkpoint, uint32_t horizon, uint32_t scenes,
                          double* per_chunk, size_t cap, xs_drift_report* report);

/* ---- schedules ---- */
XS_API xs_status xs_pass_counts(uint32_t chunks, uint32_t steps, uint64_t* naive, uint64_t* pyramid);

typedef struct xs_bench_report {
  uint64_t naive_passes;
  uint64_t pyramid_passes;
  double naive_ms;
  double pyramid_ms;
} xs_bench_report;

XS_API xs_status xs_bench(const xs_engine* engine, uint32_t chunks, uint32_t steps, uint64_t seed, uint32_t repeats,
                          xs_bench_report* report);

/* ---- transport ---- */
typedef struct xs_server xs_server;

enum { XS_SERVER_BAD_MAGIC = 1 }; /* test fault: corrupt each session's first frame */

/* port 0 picks a free port; the engine must outlive the server. */
XS_API xs_status xs_server_new(const xs_engine* engine, const xs_config* cfg, const char* host, uint16_t port,
                               uint32_t flags, xs_server** out);
XS_API uint16_t xs_server_port(const xs_server* server);
/* Blocks until xs_server_stop. */
XS_API xs_status xs_server_run(xs_server* server);
XS_API void xs_server_stop(xs_server* server);
XS_API void xs_server_free(xs_server* server);

XS_API xs_status xs_client_run(const char* host, uint16_t port, const xs_query* queries, size_t nqueries,
                               uint32_t segments, xs_frame_fn fn, void* user, xs_session_report* report);

/* ---- frames and archives ---- */
/* Reads the ids of a text/audio frame payload. */
XS_API xs_status xs_frame_tokens(const xs_frame* frame, uint32_t* ids, size_t cap, size_t* len);
/* Control code, and for error frames the message. */
XS_API xs_status xs_frame_control(const xs_frame* frame, int* code, char* msg, size_t cap, size_t* len);
/* JSON line {"type","segment","chunk","bytes"} for a frame. */
XS_API xs_status xs_frame_json(const xs_frame* frame, char* buf, size_t cap, size_t* len);

typedef struct xs_tensor_view {
  const char* name;
  const uint32_t* dims;
  uint8_t rank;
  const float* data;
} xs_tensor_view;

XS_API xs_status xs_xtar_write(const char* path, const xs_tensor_view* entries, size_t count);

/* JSON summary of an XTAR archive or a loss CSV. */
XS_API xs_status xs_inspect(const char* path, char* buf, size_t cap, size_t* len);

#ifdef __cplusplus
}
#endif

#endif
