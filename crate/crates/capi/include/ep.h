#ifndef EP_CAPI_H
#define EP_CAPI_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    EP_OK = 0,
    EP_INTERNAL = -1,
    EP_INVALID_ARGUMENT = 1,
    EP_SHAPE_MISMATCH = 2,
    EP_TAG_MISMATCH = 3,
    EP_CONFIG_MISMATCH = 4,
    EP_CAPACITY_EXCEEDED = 5,
    EP_HANDLE_STATE_ERROR = 6,
    EP_TRANSPORT_CLOSED = 7,
};

enum { EP_F32, EP_BF16, EP_F16, EP_FP8, EP_I32, EP_I64 };

enum {
    EP_TAG_TOKENS,
    EP_TAG_TOPK_IDX,
    EP_TAG_TOPK_WEIGHTS,
    EP_TAG_SCALES,
    EP_TAG_RECV_EXPERT_COUNTER_DEVICE,
    EP_TAG_RECV_EXPERT_COUNTER_HOST,
    EP_TAG_NONE,
    EP_TAG_TOKENS_PER_EXPERTS,
};

typedef struct EpWorld EpWorld;
typedef struct EpTensor EpTensor;

typedef struct {
    const EpTensor *const *tensors;
    size_t len;
} EpTensorList;

typedef struct {
    EpTensorList inputs;
    EpTensorList outputs;
    EpTensorList local;
} EpRankTensors;

size_t ep_last_error(char *buf, size_t cap);

int32_t ep_create_group(const char *config_json, EpWorld **out);
int32_t ep_group_destroy(EpWorld *w);
int32_t ep_group_num_ranks(EpWorld *w, size_t *out);

int32_t ep_tensor_create(const size_t *shape, size_t ndim, int32_t dtype, int32_t tag,
                         const uint8_t *data, size_t data_len, EpTensor **out);
void ep_tensor_destroy(EpTensor *t);
int32_t ep_tensor_read(const EpTensor *t, uint8_t *buf, size_t cap);

int32_t ep_create_handle(EpWorld *w, const EpTensor *const *topk, size_t n, uint64_t *out);
int32_t ep_dispatch(EpWorld *w, uint64_t handle, const EpRankTensors *per_rank, size_t n, bool send_only);
int32_t ep_combine(EpWorld *w, uint64_t handle, const EpRankTensors *per_rank, size_t n, bool send_only);
int32_t ep_complete(EpWorld *w, uint64_t handle);
int32_t ep_get_num_recv_tokens(EpWorld *w, uint64_t handle, size_t *out, size_t n);
int32_t ep_handle_destroy(EpWorld *w, uint64_t handle);

#ifdef __cplusplus
}
#endif

#endif
